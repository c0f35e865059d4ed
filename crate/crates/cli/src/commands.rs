use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dnl::config::KeyValues;
use dnl::data::{generate, load_dataset, load_dataset_expecting, save_dataset, ShapesSpec};
use dnl::network::{count_flops, Checkpoint, NetConfig};
use dnl::tensor::Corruption;
use dnl::training::{self, history_csv, GradcheckOptions, TrainConfig, TrainOptions, HISTORY_HEADER};
use dnl::visualize::{attention_maps, grid_labels, region_mass, write_maps};
use dnl::{Error, Result};

use crate::manifest::{sha256_hex, unix_now, RunManifest};
use crate::{Adjoint, DumpArgs, EvalArgs, Failure, FlopsArgs, GenArgs, GradcheckArgs, TrainArgs, VerificationFailed};

type CmdResult = std::result::Result<(), Failure>;

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_kv(&KeyValues::load(path)?)
}

fn checkpoint_config(ck: &Checkpoint) -> Result<TrainConfig> {
    TrainConfig::parse(&ck.config_text)
}

pub fn gen(a: GenArgs) -> CmdResult {
    let mut spec = match &a.spec {
        Some(p) => ShapesSpec::from_kv(&KeyValues::load(p)?)?,
        None => ShapesSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let data = generate(&spec, a.n)?;
    save_dataset(&a.out, &data)?;
    println!("wrote {} samples ({}x{}) to {}", data.samples.len(), spec.height, spec.width, a.out.display());
    println!("class  samples");
    for (c, n) in data.census().iter().enumerate() {
        println!("{c:>5}  {n:>7}");
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let mut cfg = match (&a.config, &resume) {
        (Some(p), _) => load_train_config(p)?,
        (None, Some(ck)) => checkpoint_config(ck)?,
        (None, None) => return Err(Error::Usage("train needs --config or --resume".into()).into()),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.no_gr {
        cfg.net.global_rectify = false;
    }
    if a.no_lr {
        cfg.net.local_retention = false;
    }
    cfg.validate()?;
    if let Some(ck) = &resume {
        if checkpoint_config(ck)? != cfg {
            return Err(Error::ConfigMismatch("resume config differs from the checkpoint's".into()).into());
        }
    }

    let data_bytes = fs::read(&a.data)?;
    let data = load_dataset_expecting(&a.data, cfg.net.num_classes)?;
    fs::create_dir_all(&a.out)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        data_hash: sha256_hex(&data_bytes),
        resumed_from: a.resume.as_ref().map(|p| p.display().to_string()),
        started_unix: unix_now(),
    };
    manifest.write(a.out.join("manifest.txt"))?;

    let start_iter = resume.as_ref().map_or(0, |ck| ck.iteration as usize);
    let opts = TrainOptions { checkpoint_dir: Some(a.out.clone()), resume };
    let outcome = match training::train(&cfg, &data, &opts) {
        Ok(o) => o,
        Err(e @ Error::Numeric(_)) => {
            let dump = format!("error: {e}\n\n{}", manifest.to_text());
            let _ = fs::write(a.out.join("diagnostics.txt"), dump);
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };

    let history_path = a.out.join("history.csv");
    let mut text = if start_iter > 0 { previous_rows(&history_path, start_iter) } else { String::new() };
    if text.is_empty() {
        text = history_csv(&outcome.history);
    } else {
        for row in &outcome.history {
            let _ = writeln!(text, "{}", row.to_csv());
        }
    }
    fs::write(&history_path, text)?;

    match outcome.history.last() {
        Some(last) => println!(
            "trained {} steps (iteration {}), final loss {:.6}; outputs in {}",
            outcome.history.len(),
            outcome.optimizer.iter,
            last.loss,
            a.out.display()
        ),
        None => println!("nothing to do: already at iteration {}", outcome.optimizer.iter),
    }
    Ok(())
}

/// Existing history rows up to and including `iter`, with header.
fn previous_rows(path: &Path, iter: usize) -> String {
    let Ok(old) = fs::read_to_string(path) else { return String::new() };
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for line in old.lines().skip(1) {
        match line.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
            Some(i) if i <= iter => {
                out.push_str(line);
                out.push('\n');
            }
            _ => {}
        }
    }
    out
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.ckpt)?;
    let cfg = checkpoint_config(&ck)?;
    let data = load_dataset(&a.data)?;
    let report = training::evaluate(&ck.params, ck.norm_stats.as_ref(), &cfg.net, &data)?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn dump_attention(a: DumpArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.ckpt)?;
    let mut net = checkpoint_config(&ck)?.net;
    net.force_pclass_ones = a.force_pclass_ones;
    let data = load_dataset_expecting(&a.data, net.num_classes)?;
    let sample = data
        .find(&a.image)
        .ok_or_else(|| Error::Usage(format!("no sample with id {:?}", a.image)))?;
    let maps = attention_maps(&ck.params, ck.norm_stats.as_ref(), &net, &sample.image, a.pixel)?;
    write_maps(&maps, &a.out)?;

    let (gh, gw) = maps.grid();
    let cells = grid_labels(&sample.labels, (sample.height(), sample.width()), (gh, gw));
    let class = cells[maps.query.0 * gw + maps.query.1];
    println!("query cell ({}, {}) on a {gh}x{gw} grid, class {class}", maps.query.0, maps.query.1);
    println!("map  sum        region_mass");
    for (i, m) in maps.maps.iter().enumerate() {
        println!("{:>3}  {:<10.6} {:.6}", i + 1, m.sum(), region_mass(m.data(), &cells, class));
    }
    println!("wrote map1..3 (.pgm, .dnlt) to {}", a.out.display());
    Ok(())
}

pub fn flops(a: FlopsArgs) -> CmdResult {
    let net = match &a.config {
        Some(p) => load_train_config(p)?.net,
        None => NetConfig::default(),
    };
    let report = count_flops(&net, a.input, a.element_bytes)?;
    println!("input {}x{}, attention positions N = {}", a.input.0, a.input.1, report.positions);
    println!("{:<24} {:>16} {:>12}", "block", "MACs", "GFLOPs");
    for b in &report.blocks {
        println!("{:<24} {:>16} {:>12.4}", b.name, b.macs, 2.0 * b.macs as f64 / 1e9);
    }
    let row = |name: &str, macs: u64| println!("{:<24} {:>16} {:>12.4}", name, macs, 2.0 * macs as f64 / 1e9);
    row("total", report.total_macs());
    row("attention module", report.module_macs());
    row("attention core", report.attention_core_macs());
    println!(
        "attention memory: {} maps of N^2, {:.3} MiB at {} bytes/element",
        report.attention_maps,
        report.attention_bytes as f64 / (1024.0 * 1024.0),
        a.element_bytes
    );
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let net = match &a.config {
        Some(p) => load_train_config(p)?.net,
        None => NetConfig { num_classes: 4, ..NetConfig::default() },
    };
    let opts = GradcheckOptions {
        corruption: a.corrupt_adjoint.map(|c| match c {
            Adjoint::Conv => Corruption::Conv2dWeight,
            Adjoint::Sigmoid => Corruption::Sigmoid,
        }),
        ..GradcheckOptions::default()
    };
    let report = training::gradcheck(&net, a.seed, &opts)?;
    println!("{:<28} {:>8} {:>14}", "parameter", "probes", "max rel err");
    for g in &report.groups {
        println!("{:<28} {:>8} {:>14.3e}", g.name, g.checked, g.max_rel_err);
    }
    let failed: Vec<&str> = report.failures().map(|g| g.name.as_str()).collect();
    if failed.is_empty() {
        println!("pass: all groups below {:e}", report.tolerance);
        Ok(())
    } else {
        Err(Failure::Verification(VerificationFailed(format!(
            "max relative error >= {:e} in {}",
            report.tolerance,
            failed.join(", ")
        ))))
    }
}
