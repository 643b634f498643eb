#![allow(dead_code)]

use std::path::{Path, PathBuf};

pub fn small_config(algorithm: &str, order: &str, concepts: usize) -> String {
    format!(
        r#"
name = "small-{algorithm}"
algorithm = "{algorithm}"
seed = 11
client_count = 2
folds = 3
order = "{order}"

[model]
hidden = [8]

[train]
batch_size = 20
epochs = 3
learning_rate = 0.3
rounds_per_concept = 2
min_train_data = 60

[detector]
padding = 20
max_window = 100

[fedavg]
rounds = 4

[cda]
eval_every = 50

[data]
source = "benchmark"
concepts = {concepts}
classes = 3
radius = 5.0
noise = 1.0
segment_length = 300
"#
    )
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn preset(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(rel)
}
