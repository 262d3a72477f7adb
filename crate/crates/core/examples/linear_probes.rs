//! Localization and classification probes on an untrained encoder, the
//! floor any pretraining run should clear.

use insloc::nn::Backbone;
use insloc::probes::{evaluate_encoder, patch_grid, ProbeConfig};
use insloc::rng::stream;
use insloc::trainer::TrainConfig;

fn main() -> insloc::Result<()> {
    let train = TrainConfig {
        gallery_size: 64,
        ..TrainConfig::default()
    };
    let encoder = Backbone::<f32>::new(train.backbone_config(), &mut stream(train.seed, "init", 0))?;

    let grid = patch_grid(64, 64, 9)?;
    println!("3x3 grid over a 64x64 image, first patch {:?}", grid[0]);

    for (name, isolated) in [("pooled patches", false), ("isolated patches", true)] {
        let probe = ProbeConfig {
            isolated_patches: isolated,
            ..ProbeConfig::default()
        };
        let r = evaluate_encoder(&encoder, &train, &probe)?;
        println!(
            "{name:<17} loc {:.3} (chance {:.3})  cls {:.3} (chance {:.3})",
            r.localization.eval_accuracy,
            r.localization.chance,
            r.classification.eval_accuracy,
            r.classification.chance,
        );
    }
    Ok(())
}
