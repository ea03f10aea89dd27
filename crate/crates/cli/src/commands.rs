use std::fs;
use std::path::{Path, PathBuf};

use jego_core::analysis::{ledger_csv, stacked_coverage, strategy_ledger, LayoutKind};
use jego_core::config::{self, Settings};
use jego_core::matcher::{match_pair, MatcherConfig, Model};
use jego_core::pgm::Gray;
use jego_core::selftest::SelfTest;
use jego_core::supervision::{texture_corpus, train_dir, TrainConfig};
use log::info;

use crate::{require_out, Failure, Global, Outcome, Status};

pub const MATCH_FILE: &str = "matches.txt";

fn write(path: PathBuf, text: &str) -> Result<(), Failure> {
    fs::write(&path, text).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure(format!("{}: {e}", dir.display())))
}

fn read_config(global: &Global) -> Result<Option<String>, Failure> {
    match &global.config {
        None => Ok(None),
        Some(p) => fs::read_to_string(p)
            .map(Some)
            .map_err(|e| Failure(format!("{}: {e}", p.display()))),
    }
}

fn dims(global: &Global) -> Result<(usize, usize), Failure> {
    global.dims.ok_or_else(|| Failure("--dims HxW is required for this command".into()))
}

pub fn cmd_match(global: &Global, image_a: &Path, image_b: &Path, weights: &Path) -> Outcome {
    let out = require_out(global)?;
    if !weights.is_dir() {
        return Err(Failure(format!("weights directory {} not found", weights.display())));
    }
    let mut model = Model::load(weights)?;
    if let Some(text) = read_config(global)? {
        let mut cfg = model.config.clone();
        config::apply(&text, &mut [&mut cfg as &mut dyn Settings])?;
        if cfg.ssm_dims() != model.config.ssm_dims()
            || (cfg.fine_channels, cfg.fine_window, cfg.joint_layers)
                != (model.config.fine_channels, model.config.fine_window, model.config.joint_layers)
        {
            return Err(Failure("--config may only change matching thresholds, not model shapes".into()));
        }
        model.config = cfg;
    }
    let (a, b) = (Gray::load(image_a)?, Gray::load(image_b)?);
    let matches = match_pair(&model, &a, &b)?;
    create_dir(out)?;
    write(out.join(MATCH_FILE), &matches.to_text())?;
    println!(
        "coarse {} fine {} subpixel {}",
        matches.coarse.len(),
        matches.fine.len(),
        matches.subpixel.len()
    );
    Ok(if matches.is_empty() { Status::Empty } else { Status::Ok })
}

pub fn cmd_train(global: &Global, corpus: &Path) -> Outcome {
    let out = require_out(global)?;
    if !corpus.is_dir() {
        return Err(Failure(format!("corpus directory {} not found", corpus.display())));
    }
    let mut cfg = TrainConfig::default();
    let mut model_cfg = MatcherConfig::default();
    if let Some(text) = read_config(global)? {
        config::apply(&text, &mut [&mut cfg as &mut dyn Settings, &mut model_cfg])?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some((h, w)) = global.dims {
        if h != w {
            return Err(Failure("training images are square, --dims must be NxN".into()));
        }
        cfg.image_size = h;
    }
    cfg.validate().map_err(Failure)?;
    info!("training {} steps on {}", cfg.steps, corpus.display());
    let report = train_dir(&cfg, &model_cfg, corpus, out)?;
    println!(
        "initial loss {:.6} final loss {:.6} precision {}",
        report.initial_loss(),
        report.final_loss(),
        report.final_precision().map_or("-".into(), |p| format!("{p:.4}"))
    );
    Ok(Status::Ok)
}

pub fn cmd_bench(global: &Global, step: usize) -> Outcome {
    let (h, w) = dims(global)?;
    let csv = ledger_csv(&strategy_ledger(h, w, step)?);
    print!("{csv}");
    if let Some(out) = &global.out {
        create_dir(out)?;
        write(out.join("ledger.csv"), &csv)?;
    }
    Ok(Status::Ok)
}

pub fn cmd_erf(global: &Global, layers: usize) -> Outcome {
    let (h, w) = dims(global)?;
    let out = require_out(global)?;
    if layers == 0 {
        return Err(Failure("--layers must be positive".into()));
    }
    let reports = [LayoutKind::Jego, LayoutKind::ForwardOnly]
        .map(|kind| stacked_coverage(kind, h, w, 1, layers).map(|r| (kind, r)));
    create_dir(out)?;
    let mut summary = String::from("layout,min,mean,interior_min\n");
    for r in reports {
        let (kind, report) = r?;
        let name = kind.name();
        write(out.join(format!("coverage_{name}.csv")), &report.to_csv())?;
        report.heatmap()?.save(&out.join(format!("coverage_{name}.pgm")))?;
        let fmt = |v: Option<f64>| v.map_or("-".into(), |v| v.to_string());
        summary += &format!(
            "{name},{},{},{}\n",
            fmt(report.min()),
            fmt(report.mean()),
            fmt(report.interior_min())
        );
    }
    write(out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(Status::Ok)
}

pub fn cmd_selftest(merge_fault: bool) -> Outcome {
    let suite = SelfTest {
        merge_fault,
        ..SelfTest::default()
    };
    let results = suite.run();
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure(format!("{failed} of {} suites failed", results.len())));
    }
    Ok(Status::Ok)
}

pub fn cmd_gen_corpus(global: &Global, count: usize) -> Outcome {
    let out = require_out(global)?;
    let (h, w) = global.dims.unwrap_or((96, 96));
    create_dir(out)?;
    for (k, img) in texture_corpus(count, w, h, global.seed.unwrap_or(0)).iter().enumerate() {
        img.save(&out.join(format!("texture_{k:03}.pgm")))?;
    }
    println!("wrote {count} textures of {h}x{w}");
    Ok(Status::Ok)
}
