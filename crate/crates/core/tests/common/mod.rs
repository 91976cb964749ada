#![allow(dead_code)]

use kvverify::config::{load_config, SystemConfig};

/// One GPU, 50 GB weights, ten 4 GB contexts compressed 4×, x = 30, over a
/// 50 GB/s effective link. HBM bandwidth is chosen so an iteration reading
/// weights plus every compressed cache and one full cache takes 37 ms.
pub const LONG_CONTEXT: &str = r#"
[hardware]
hbm_bandwidth = 1714285714285.7144
interconnect_bandwidth = 5e10
gpu_mem = 96000000000

[model]
weights_bytes = 50000000000
kv_bytes_per_token = 40960

[acceptance]
kind = "per-token-iid"
per_token_prob = [{ c = 0.25, p = 0.9 }]

[runtime]
draft_length = 30
lookahead_window = 64
iteration_time_mode = "derived"
compression_ratio = 0.25

[scenario]
kind = "long-context"
batch_size = 10
kv_full_bytes = 4000000000
output_tokens = 256
"#;

pub const REMOTE_PREFIX: &str = r#"
[hardware]
hbm_bandwidth = 1.6e12
storage_local_bandwidth = 5e10
storage_remote_bandwidth = 5e9
gpu_mem = 96000000000
local_gpus = 1
remote_gpus = 1

[model]
weights_bytes = 50000000000
kv_bytes_per_token = 40960

[acceptance]
kind = "tabulated"
table = [{ x = 10, c = 0.25, gamma = 0.8 }]

[runtime]
draft_length = 10
lookahead_window = 64
iteration_time_mode = "derived"
compression_ratio = 0.25
acceptance_draws = "deterministic-mean"

[scenario]
kind = "remote-prefix"
batch_size = 1
kv_full_bytes = 4000000000
output_tokens = 80
verify_forward_s = 0.05
"#;

pub fn long_context() -> SystemConfig {
    load_config(LONG_CONTEXT).expect("long-context fixture")
}

pub fn remote_prefix() -> SystemConfig {
    load_config(REMOTE_PREFIX).expect("remote-prefix fixture")
}

pub const GB: u64 = 1_000_000_000;
