use std::fs::File;
use std::path::Path;

use ucmnet::data::{load_image, make_split, save_mask_png_resized, DataError, DatasetManifest, ManifestSource, Split};
use ucmnet::metrics::MetricsReport;
use ucmnet::model::{BlockKind, NetworkConfig};
use ucmnet::profile::{profile_network, CostReport};
use ucmnet::train::{evaluate, Trainer, FINAL_WEIGHTS, HISTORY_FILE};
use ucmnet::weights::{self, NamedTensors};
use ucmnet::{Network, ParamStore};

use crate::config::RunConfig;
use crate::failure::Failure;

/// Written next to the history so a run can be reproduced from its output directory.
pub const RESOLVED_CONFIG: &str = "config.txt";

/// Reference parameter counts and GFLOPs for the three block variants, in
/// ablation-table row order.
pub const REFERENCE: [(BlockKind, u64, f64); 3] = [
    (BlockKind::VariantADoubleConv, 248_531, 0.5715),
    (BlockKind::VariantBConv1x1, 148_157, 0.3700),
    (BlockKind::VariantCUcm, 49_932, 0.0465),
];

fn reference_for(config: &NetworkConfig) -> Option<(u64, f64)> {
    REFERENCE
        .iter()
        .find(|(k, _, _)| *config == NetworkConfig::variant(*k))
        .map(|&(_, p, g)| (p, g))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::other(format!("{}: {e}", path.display()))
}

/// Read the configured manifest and assign any unassigned records with the
/// run's seed and ratio, so train and eval see the same split.
fn read_manifest(cfg: &RunConfig) -> Result<DatasetManifest, Failure> {
    let path = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Failure::config("config error: no manifest; set `manifest` or pass --manifest"))?;
    let m = DatasetManifest::read_csv(path)?;
    Ok(make_split(m, cfg.split_ratio, cfg.seed)?)
}

/// Check every tensor against the model before copying anything, naming each
/// mismatch. Checkpoint-only entries (`optim.*`, `train.*`) are skipped.
fn load_weights(store: &mut ParamStore<f32>, tensors: &NamedTensors) -> Result<(), Failure> {
    let mut problems = Vec::new();
    for e in store.entries() {
        match tensors.iter().find(|(n, _)| *n == e.name) {
            None => problems.push(format!("  {}: missing from weight file", e.name)),
            Some((_, t)) if t.shape() != e.value.shape() => {
                problems.push(format!("  {}: file shape {:?}, model shape {:?}", e.name, t.shape(), e.value.shape()))
            }
            Some(_) => {}
        }
    }
    for (n, _) in tensors {
        if !n.starts_with("optim.") && !n.starts_with("train.") && store.id_of(n).is_none() {
            problems.push(format!("  {n}: not part of the configured model"));
        }
    }
    if !problems.is_empty() {
        return Err(Failure::config(format!(
            "weights do not match the configured architecture:\n{}",
            problems.join("\n")
        )));
    }
    Ok(weights::load_into_store(store, tensors, true)?)
}

fn load_network(cfg: &RunConfig, weights_path: &Path) -> Result<Network<f32>, Failure> {
    let mut net = Network::new(cfg.network(), cfg.seed)?;
    let tensors = weights::load(weights_path)?;
    load_weights(net.params_mut(), &tensors)?;
    Ok(net)
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let manifest = read_manifest(cfg)?;
    let size = (cfg.image_size, cfg.image_size);
    let train_set = ManifestSource::new(&manifest, Split::Train, size)?.preload()?;
    let test_set = match ManifestSource::new(&manifest, Split::Test, size) {
        Ok(s) => Some(s.preload()?),
        Err(DataError::EmptySplit(_)) => None,
        Err(e) => return Err(e.into()),
    };
    println!(
        "train {} samples, test {} samples, {} epochs",
        train_set.len(),
        test_set.as_ref().map_or(0, Vec::len),
        cfg.epochs
    );
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let cfg_path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&cfg_path, cfg.render()).map_err(|e| io_failure(&cfg_path, e))?;

    let net = Network::new(cfg.network(), cfg.seed)?;
    let mut trainer = Trainer::new(net, cfg.train())?;
    let total = cfg.epochs;
    trainer.run(&train_set, test_set.as_ref(), |r| {
        let mut line = format!("epoch {:>4}/{total}  lr {:.3e}  loss {:.5}", r.epoch + 1, r.lr, r.train_loss);
        if let Some(m) = &r.test {
            line += &format!("  test mIoU {:.4} mDice {:.4}", m.miou, m.mdice);
        }
        println!("{line}");
    })?;
    println!("history {}", dir.join(HISTORY_FILE).display());
    println!("weights {}", dir.join(FINAL_WEIGHTS).display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, weights_path: &Path, split: Split, out: &Path) -> Result<(), Failure> {
    let manifest = read_manifest(cfg)?;
    let src = ManifestSource::new(&manifest, split, (cfg.image_size, cfg.image_size))?;
    let mut net = load_network(cfg, weights_path)?;
    let report = evaluate(&mut net, &src, cfg.threshold)?;
    println!("split     {split} ({} images)", report.n_images);
    println!("mIoU      {:.4}", report.miou);
    println!("mDice     {:.4}", report.mdice);
    println!("mIoU*     {:.4}", report.miou_star);
    println!("mDice*    {:.4}", report.mdice_star);
    let f = File::create(out).map_err(|e| io_failure(out, e))?;
    let name = split.to_string();
    MetricsReport::write_csv(&[(name.as_str(), &report)], f).map_err(|e| Failure::other(format!("{}: {e}", out.display())))?;
    Ok(())
}

pub fn predict(cfg: &RunConfig, weights_path: &Path, image: &Path, out: &Path) -> Result<(), Failure> {
    let mut net = load_network(cfg, weights_path)?;
    let (h, w) = (cfg.image_size, cfg.image_size);
    let (img, orig) = load_image(image, (h, w))?;
    let batch = img.reshape(&[1, 3, h, w]).map_err(|e| Failure::other(e.to_string()))?;
    let probs = net.predict(&batch)?;
    save_mask_png_resized(&probs, out, cfg.threshold as f32, orig)?;
    println!("mask {} ({}x{})", out.display(), orig.0, orig.1);
    Ok(())
}

fn cost(net_cfg: NetworkConfig, seed: u64) -> Result<CostReport, Failure> {
    let (h, w) = net_cfg.input_size;
    let shape = [1, net_cfg.input_channels, h, w];
    let net = Network::<f32>::new(net_cfg, seed)?;
    Ok(profile_network(&net, &shape)?)
}

pub fn profile(cfg: &RunConfig, csv: Option<&Path>) -> Result<(), Failure> {
    let net_cfg = cfg.network();
    let target = reference_for(&net_cfg);
    let report = cost(net_cfg, cfg.seed)?;
    print!("{}", report.render_text(target));
    if let Some(p) = csv {
        let f = File::create(p).map_err(|e| io_failure(p, e))?;
        report.write_csv(f)?;
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<(), Failure> {
    println!(
        "{:<22} {:>9} {:>8} {:>11} {:>9} {:>9} {:>9}",
        "variant", "params", "GFLOPs", "ref params", "ref GFLOPs", "Δparams", "ΔGFLOPs"
    );
    for (kind, ref_p, ref_g) in REFERENCE {
        let net_cfg = NetworkConfig {
            block_kind: kind,
            ..cfg.network()
        };
        let r = cost(net_cfg, cfg.seed)?;
        println!(
            "{:<22} {:>9} {:>8.4} {:>11} {:>10.4} {:>+8.2}% {:>+8.2}%",
            kind.as_str(),
            r.total_params,
            r.gflops,
            ref_p,
            ref_g,
            100.0 * (r.total_params as f64 - ref_p as f64) / ref_p as f64,
            100.0 * (r.gflops - ref_g) / ref_g
        );
    }
    Ok(())
}

pub fn split(manifest: &Path, out: &Path, ratio: f64, seed: u64) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Failure::config(format!("config error: split ratio {ratio} outside [0,1]")));
    }
    let mut m = make_split(DatasetManifest::read_csv(manifest)?, ratio, seed)?;
    // record paths are relative to the manifest's directory; keep them valid
    // when the output lands elsewhere
    let out_root = out.parent().unwrap_or(Path::new(""));
    if out_root != m.root {
        for r in &mut m.records {
            r.image = m.root.join(&r.image);
            r.mask = m.root.join(&r.mask);
        }
    }
    m.write_csv(out)?;
    println!(
        "train {}  test {}  -> {}",
        m.split(Split::Train).len(),
        m.split(Split::Test).len(),
        out.display()
    );
    Ok(())
}
