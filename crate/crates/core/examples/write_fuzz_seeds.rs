//! Regenerates the checked-in fuzz corpus: `cargo run -p ssae --example write_fuzz_seeds`.

use std::fs;
use std::path::Path;

use ssae::datagen::{synthesize, synthesize_entangled, DgpConfig};
use ssae::linalg::stage_rng;
use ssae::model::{init_params, BatchNormState};
use ssae::store::{
    encode_checkpoint, encode_ground_truth, encode_matrix, encode_pairs, Checkpoint, Labels, PairLabel,
};
use ssae::trainer::TrainConfig;
use ssae::Matrix;

fn write(dir: &Path, name: &str, bytes: &[u8]) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(name), bytes).unwrap();
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let small = DgpConfig {
        embed_dim: 4,
        num_pairs: 6,
        ..DgpConfig::synth(3, 2).with_seed(1)
    };
    let (pairs, truth) = synthesize(&small).unwrap();
    let (_, entangled) = synthesize_entangled(&small).unwrap();

    let dir = root.join("decode_pairs");
    let good = encode_pairs(&pairs, 1).unwrap();
    write(&dir, "valid", &good);
    write(&dir, "truncated", &good[..good.len() - 5]);
    write(&dir, "header_only", &good[..24]);
    let mut v2 = good.clone();
    v2[4] = 2;
    write(&dir, "version2", &v2);

    let dir = root.join("decode_ground_truth");
    write(&dir, "valid", &encode_ground_truth(&truth).unwrap());
    write(&dir, "entangled", &encode_ground_truth(&entangled).unwrap());
    write(&dir, "ragged", br#"{"version":1,"num_concepts":2,"delta_c":[[1.0]],"supports":[[0]],"mixing":[[1.0,0.0]]}"#);

    let dir = root.join("decode_checkpoint");
    for (name, bn) in [("valid", false), ("batch_norm", true)] {
        let ck = Checkpoint {
            config: TrainConfig::new(2, 0.5),
            params: init_params(4, 2, &mut stage_rng(3, 0)),
            bn: BatchNormState::new(2, bn),
            lambda: 0.125,
            seed: 3,
        };
        write(&dir, name, &encode_checkpoint(&ck).unwrap());
    }

    let dir = root.join("decode_labels");
    let labels = Labels::new(
        vec!["tense".into(), "gender".into()],
        vec![PairLabel { varying: vec![0] }, PairLabel { varying: vec![0, 1] }],
    );
    write(&dir, "valid", &serde_json::to_vec(&labels).unwrap());
    write(&dir, "out_of_range", br#"{"version":1,"concepts":["a"],"pairs":[{"varying":[4]}]}"#);

    let dir = root.join("decode_matrix");
    write(&dir, "valid", &encode_matrix(&Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])));
    write(&dir, "empty", &encode_matrix(&Matrix::zeros(0, 0)));
    println!("wrote corpus under {}", root.display());
}
