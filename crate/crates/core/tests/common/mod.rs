#![allow(dead_code)]

use egoground::app::RunConfig;

/// A model and dataset small enough to train in well under a second.
pub const TINY: &str = r#"
seed = 1
phase = "finetune"

[model]
dim = 16
heads = 2
text_layers = 1
object_layers = 1
fusion_layers = 2
pyramid_levels = 2
ssm_state = 2
ffn_mult = 2

[data]
t = 16
d_v = 16
d_t = 8
d_o = 8
num_categories = 4
signal_mode = "mixed"

[dataset]
pretrain_size = 8
train_size = 8
val_size = 4

[optim]
batch_size = 4
total_epochs = 2
warmup_epochs = 1

[objects]
n_o = 2

[shots]
shot_seconds = 2.0
"#;

pub fn tiny(overrides: &[&str]) -> RunConfig {
    let over: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_str(TINY, &over).expect("tiny config is valid")
}
