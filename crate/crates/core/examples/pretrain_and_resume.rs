//! A short pretraining run, checkpointed halfway and resumed. The resumed
//! trainer finishes bit-identical to one that never stopped.

use insloc::trainer::{Checkpoint, TrainConfig, TrainMode, Trainer};

fn small_config() -> TrainConfig {
    let mut c = TrainConfig {
        mode: TrainMode::InslocC4,
        steps: 12,
        batch_size: 8,
        queue_size: 64,
        gallery_size: 32,
        ..TrainConfig::default()
    };
    c.backbone.widths = vec![8, 8, 16, 16];
    c.backbone.head_width = 32;
    c.backbone.mlp_hidden = 32;
    c.backbone.embed_dim = 32;
    c
}

fn main() -> insloc::Result<()> {
    let mut straight = Trainer::new(small_config())?;
    for r in straight.run()? {
        println!(
            "step {:>2}  loss {:.4}  pos-sim {:.3}  lr {:.5}",
            r.step, r.loss, r.positive_similarity, r.lr
        );
    }

    let dir = std::env::temp_dir().join("insloc-resume-example");
    std::fs::create_dir_all(&dir).map_err(|e| insloc::Error::io(&dir, e))?;
    let path = dir.join("half.ilck");

    let mut first = Trainer::new(small_config())?;
    first.run_until(6, |_| {})?;
    first.save_checkpoint(&path)?;

    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path)?)?;
    resumed.run()?;
    let same = resumed.to_checkpoint().encode() == straight.to_checkpoint().encode();
    println!("resumed from step 6, final state identical: {same}");
    Ok(())
}
