//! Subcommand bodies for the `insloc` binary. Each returns the process exit
//! code: 0 on success, 2 for configuration errors, 1 for anything else.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::composition::{make_pair, CompositeSample};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imaging::{generate_gallery, write_ppm};
use crate::probes::{evaluate_encoder, probe_tsv_row, ProbeConfig};
use crate::rng::stream;
use crate::selfcheck::{run_selfcheck, SelfcheckOptions};
use crate::trainer::{load_query_encoder, pretrain, Checkpoint, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::AtStep { source, .. } => exit_code(source),
        _ => EXIT_RUNTIME,
    }
}

fn report(result: Result<()>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains from scratch; writes `checkpoint.ilck` and `metrics.tsv` under
/// `out_dir`.
pub fn pretrain_to_dir(config: &RunConfig) -> Result<PathBuf> {
    create_dir(&config.out_dir)?;
    let metrics_path = config.metrics_path();
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let (trainer, _) = pretrain(config.train.clone(), Some(&mut metrics))?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let path = config.checkpoint_path();
    trainer.save_checkpoint(&path)?;
    Ok(path)
}

pub fn cmd_pretrain(config_path: Option<&Path>, overrides: &[String]) -> i32 {
    report((|| {
        let config = RunConfig::load(config_path, overrides)?;
        let path = pretrain_to_dir(&config)?;
        eprintln!("checkpoint written to {}", path.display());
        Ok(())
    })())
}

/// The probe TSV row for a checkpoint.
pub fn probe_checkpoint(path: &Path, probe: &ProbeConfig) -> Result<String> {
    let ckpt = Checkpoint::load(path)?;
    let (train, encoder) = load_query_encoder(&ckpt)?;
    let r = evaluate_encoder(&encoder, &train, probe)?;
    Ok(probe_tsv_row(
        &train.mode.to_string(),
        probe.m,
        r.localization.eval_accuracy,
        r.classification.eval_accuracy,
        probe.seed,
    ))
}

/// `checkpoint` defaults to the configured run's checkpoint; `m` and
/// `isolated` override the probe keys.
pub fn cmd_probe(
    config_path: Option<&Path>,
    overrides: &[String],
    checkpoint: Option<&Path>,
    m: Option<usize>,
    isolated: bool,
) -> i32 {
    report((|| {
        let mut config = RunConfig::load(config_path, overrides)?;
        if let Some(m) = m {
            config.set("probe_m", &m.to_string())?;
        }
        if isolated {
            config.probe.isolated_patches = true;
        }
        let path = checkpoint.map_or_else(|| config.checkpoint_path(), Path::to_path_buf);
        println!("{}", probe_checkpoint(&path, &config.probe)?);
        Ok(())
    })())
}

fn composite_row(file: &str, s: &CompositeSample) -> String {
    let b = &s.bbox;
    format!(
        "{file}\t{}\t{}\t{}\t{}\t{}\t{}",
        b.x1, b.y1, b.x2, b.y2, s.instance_id, s.background_id
    )
}

/// Writes `count` query/key composite pairs, each raw and with its box
/// drawn, plus `composites.tsv` with one row per composite. Returns the TSV
/// path.
pub fn write_composites(train: &TrainConfig, count: usize, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let gallery = generate_gallery(train.gallery_size, train.image_size, train.seed)?;
    let params = train.composition_params();
    let augment = train.augment_params();
    let mut rows = String::new();
    for j in 0..count {
        let mut rng = stream(train.seed, "inspect", j as u64);
        let instance = j % gallery.len();
        let (q, k) = make_pair(&gallery, instance, &augment, &params, &mut rng)?;
        for (role, s) in [("query", &q), ("key", &k)] {
            if !s.bbox.is_inside(s.image.height(), s.image.width()) {
                return Err(Error::InvalidArgument(format!(
                    "composite {j} {role} box {:?} leaves the image",
                    s.bbox
                )));
            }
            let raw = format!("pair{j:04}_{role}.ppm");
            let boxed = format!("pair{j:04}_{role}_box.ppm");
            write_ppm(&s.image, dir.join(&raw))?;
            let mut overlay = s.image.clone();
            let b = &s.bbox;
            overlay.draw_rect(
                b.x1 as usize,
                b.y1 as usize,
                b.x2 as usize,
                b.y2 as usize,
                [1.0, 0.0, 0.0],
            );
            write_ppm(&overlay, dir.join(&boxed))?;
            rows.push_str(&composite_row(&raw, s));
            rows.push('\n');
        }
    }
    let tsv = dir.join("composites.tsv");
    fs::write(&tsv, rows).map_err(|e| Error::io(&tsv, e))?;
    Ok(tsv)
}

pub fn cmd_compose(config_path: Option<&Path>, overrides: &[String]) -> i32 {
    report((|| {
        let config = RunConfig::load(config_path, overrides)?;
        let tsv = write_composites(&config.train, config.compose_count, &config.out_dir)?;
        eprintln!("{} composite pairs listed in {}", config.compose_count, tsv.display());
        Ok(())
    })())
}

/// Prints one line per check; exit 0 iff every check passes.
pub fn cmd_selfcheck(options: &SelfcheckOptions) -> i32 {
    let checks = run_selfcheck(options);
    for c in &checks {
        println!("{}", c.line());
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        EXIT_OK
    } else {
        for c in &failed {
            eprintln!(
                "check {} failed: error {:.3e} exceeds {:.0e}",
                c.name, c.error, c.tolerance
            );
        }
        EXIT_RUNTIME
    }
}
