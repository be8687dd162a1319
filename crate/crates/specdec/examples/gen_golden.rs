//! Writes the golden checkpoint fixture used by the format-stability test.

use specdec::rng::seeded;
use specdec::target::{TargetConfig, TargetModel};

fn main() {
    let cfg = TargetConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 8,
        ff_mult: 2,
        ..TargetConfig::default()
    };
    let mut model = TargetModel::new(cfg, &mut seeded(0x60_1d)).unwrap();
    model.freeze();
    let path = std::path::Path::new("crates/specdec/tests/fixtures/golden.ckpt");
    specdec::checkpoint::save_target(path, &model).unwrap();
    println!("wrote {} ({} params, hash {})", path.display(), model.param_count(), model.weight_hash());
}
