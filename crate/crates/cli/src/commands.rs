use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tcformer::checkpoint;
use tcformer::config::RunConfig;
use tcformer::dpc_knn;
use tcformer::exec::Exec;
use tcformer::harness::dataset::{generate_dataset, generate_sample, held_out_seed, NUM_KEYPOINTS};
use tcformer::harness::density::token_density_report;
use tcformer::harness::gradcheck::{check_module, GradCheckOptions, MODULES};
use tcformer::harness::pck::{evaluate_pck, pck_from_heatmaps};
use tcformer::harness::report::{write_loss_csv, write_loss_png};
use tcformer::harness::train::train as run_training;
use tcformer::model::{param_breakdown, HeadKind, Model};
use ndarray::Array2;
use tcformer::overlay::{read_image, write_overlays};
use tcformer::params::ParamStore;
use tcformer::token_space::RegionMap;
use tcformer::{Error, Result};

use crate::Common;

/// Config file (or defaults) with the command-line flags applied on top.
fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(preset) = common.preset {
        cfg.model.preset = Some(preset);
        cfg.model.stages = None;
    }
    if let Some(head) = common.head {
        cfg.head.kind = head;
    }
    if let Some(ctm) = common.ctm {
        cfg.ctm.method = ctm;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Reads one point per row. A first row that does not parse as numbers is
/// taken as a header; any later malformed row is an error naming its line.
fn read_points(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(format!("points file {} not found", path.display())),
        _ => Error::Io(e),
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => {
                if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!("line {line}: non-finite value {v}")));
                }
                rows.push(row);
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::InvalidInput(format!("line {line}: {e}"))),
        }
    }
    let dim = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || dim == 0 {
        return Err(Error::InvalidInput(format!("{} contains no points", path.display())));
    }
    Ok(Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j]))
}

pub fn cluster(common: &Common, points: &Path, clusters: usize, k: usize) -> Result<()> {
    let x = read_points(points)?;
    let result = dpc_knn::cluster(x.view(), clusters, k)?;
    let sink: Box<dyn Write> = match &common.out {
        Some(dir) => {
            create_dir(dir)?;
            Box::new(File::create(dir.join("clusters.csv"))?)
        }
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["point_index", "cluster_id", "density", "indicator", "score", "is_center"])?;
    for i in 0..x.nrows() {
        w.write_record([
            i.to_string(),
            result.assignment[i].to_string(),
            format!("{:.12e}", result.density[i]),
            format!("{:.12e}", result.indicator[i]),
            format!("{:.12e}", result.score[i]),
            result.is_center(i).to_string(),
        ])?;
    }
    w.flush()?;
    if let Some(dir) = &common.out {
        println!("clustered {} points into {} clusters -> {}", x.nrows(), result.num_clusters(), dir.join("clusters.csv").display());
    }
    Ok(())
}

pub fn train(common: &Common) -> Result<()> {
    let run = run_config(common)?;
    run.validate()?;
    let cfg = run.model_config()?;
    if cfg.head == HeadKind::Classification {
        return Err(Error::InvalidConfig("training uses keypoint heatmaps; choose the mta or deconv head".into()));
    }
    if cfg.out_channels != NUM_KEYPOINTS {
        return Err(Error::InvalidConfig(format!("the synthetic task has {NUM_KEYPOINTS} keypoints, head has {} outputs", cfg.out_channels)));
    }
    let dir = run.output.dir.clone();
    create_dir(&dir)?;
    std::fs::write(dir.join("config.toml"), run.to_toml()?)?;

    let res = (cfg.input_height, cfg.input_width);
    let data = generate_dataset(run.data.seed, run.data.count, res)?;
    let test = generate_dataset(held_out_seed(run.data.seed), run.data.test_count, res)?;
    let mut store = ParamStore::new(run.model.init_seed);
    let model = Model::new(&mut store, cfg.clone())?;

    let mut log = BufWriter::new(File::create(dir.join("train.log"))?);
    let mut log_err = None;
    let report = run_training(&model, &mut store, &data, &run.train, Exec::default(), |step, loss| {
        let lr = run.train.learning_rate_at(step);
        if let Err(e) = writeln!(log, "step={step} loss={loss:.9e} lr={lr:.6e}") {
            log_err.get_or_insert(e);
        }
        if step % 50 == 0 || step + 1 == run.train.steps {
            eprintln!("step {step:>5}  loss {loss:.5e}  lr {lr:.3e}");
        }
    });
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let report = report?;

    checkpoint::save(&dir.join("model.tcf"), &cfg, &store)?;
    write_loss_csv(&dir.join("loss.csv"), &report.losses)?;
    write_loss_png(&dir.join("loss.png"), &report.losses)?;

    let threshold = run.data.pck_threshold;
    let pck = evaluate_pck(&model, &store, &test, threshold)?;
    let density = token_density_report(&model, &store, &test)?;
    let final_loss = report.losses.last().copied().unwrap_or(f64::NAN);
    let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))?;
    metrics.write_record(["metric", "value"])?;
    for (k, v) in [
        ("final_loss", final_loss),
        ("pck", pck),
        ("density_detail", density.detail),
        ("density_body", density.body),
        ("density_background", density.background),
        ("density_ratio", density.ratio),
        ("seconds", report.elapsed.as_secs_f64()),
    ] {
        metrics.write_record([k.to_string(), format!("{v:.6}")])?;
    }
    metrics.flush()?;

    println!("trained {} steps in {:.1}s, final loss {final_loss:.4e}", report.losses.len(), report.elapsed.as_secs_f64());
    println!("held-out PCK@{threshold} = {pck:.3} ({} samples)", test.len());
    println!("token density detail/background = {:.3}", density.ratio);
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn eval(common: &Common, checkpoint_path: Option<PathBuf>, perfect: bool) -> Result<()> {
    let run = run_config(common)?;
    let threshold = run.data.pck_threshold;
    if perfect {
        let side = run.resolution();
        let test = generate_dataset(held_out_seed(run.data.seed), run.data.test_count, (side, side))?;
        let heatmaps: Vec<_> = test.iter().map(|s| s.heatmaps.clone()).collect();
        let pck = pck_from_heatmaps(&heatmaps, &test, threshold)?;
        println!("pck={pck:.4} threshold={threshold} samples={} source=ground-truth", test.len());
        return Ok(());
    }
    let path = checkpoint_path.unwrap_or_else(|| run.output.dir.join("model.tcf"));
    let (model, store) = checkpoint::load(&path)?;
    if model.cfg.head == HeadKind::Classification {
        return Err(Error::InvalidInput("PCK needs a heatmap head; the checkpoint has a classification head".into()));
    }
    let res = (model.cfg.input_height, model.cfg.input_width);
    let test = generate_dataset(held_out_seed(run.data.seed), run.data.test_count, res)?;
    let pck = evaluate_pck(&model, &store, &test, threshold)?;
    let d = token_density_report(&model, &store, &test)?;
    println!("pck={pck:.4} threshold={threshold} samples={}", test.len());
    println!("density detail={:.4} body={:.4} background={:.4} ratio={:.4}", d.detail, d.body, d.background, d.ratio);
    if let Some(dir) = &common.out {
        create_dir(dir)?;
        let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
        w.write_record(["metric", "value"])?;
        for (k, v) in [("pck", pck), ("density_detail", d.detail), ("density_body", d.body), ("density_background", d.background), ("density_ratio", d.ratio)] {
            w.write_record([k.to_string(), format!("{v:.6}")])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn visualize(common: &Common, checkpoint_path: &Path, image: Option<&Path>, sample: usize, scale: u32) -> Result<()> {
    if scale == 0 {
        return Err(Error::InvalidInput("scale must be at least 1".into()));
    }
    let run = run_config(common)?;
    let (model, store) = checkpoint::load(checkpoint_path)?;
    let res = (model.cfg.input_height, model.cfg.input_width);
    let img = match image {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Missing(format!("image {} not found", path.display())));
            }
            let img = read_image(path)?;
            if (img.height, img.width) != res {
                return Err(Error::InvalidInput(format!(
                    "image is {}x{}, the model expects {}x{}",
                    img.height, img.width, res.0, res.1
                )));
            }
            img
        }
        None => generate_sample(held_out_seed(run.data.seed), sample, res)?.image,
    };
    let out = model.forward(&store, &img)?;
    let regions: Vec<&RegionMap> = out.stages.iter().map(|s| s.regions.as_ref()).collect();
    let dir = run.output.dir;
    let written = write_overlays(&dir, &img, &regions, scale)?;
    for (s, st) in out.stages.iter().enumerate() {
        println!("stage{}: {} tokens", s + 1, st.regions.num_tokens());
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn params(common: &Common, resolution: Option<usize>) -> Result<()> {
    let mut run = run_config(common)?;
    if resolution.is_some() {
        run.data.resolution = resolution;
    }
    let cfg = run.model_config()?;
    let params = param_breakdown(&cfg)?;
    let mut shapes = ParamStore::shapes_only();
    let macs = Model::new(&mut shapes, cfg.clone())?.mac_breakdown();

    let mut modules: Vec<String> = params.iter().map(|(m, _)| m.clone()).collect();
    for (m, _) in &macs {
        if !modules.contains(m) {
            modules.push(m.clone());
        }
    }
    let lookup = |rows: &[(String, u64)], m: &str| rows.iter().find(|(n, _)| n == m).map_or(0, |(_, v)| *v);
    let params: Vec<(String, u64)> = params.into_iter().map(|(m, n)| (m, n as u64)).collect();
    let rows: Vec<(String, u64, u64)> = modules.iter().map(|m| (m.clone(), lookup(&params, m), lookup(&macs, m))).collect();
    let total_params: u64 = rows.iter().map(|r| r.1).sum();
    let total_macs: u64 = rows.iter().map(|r| r.2).sum();

    let name = cfg.preset.map_or("custom".to_string(), |p| p.to_string());
    println!(
        "model {name}  merge {:?}  head {:?}  input {}x{}",
        cfg.merge, cfg.head, cfg.input_height, cfg.input_width
    );
    println!("{:<10} {:>14} {:>16}", "module", "params", "MACs");
    for (m, p, f) in &rows {
        println!("{m:<10} {p:>14} {f:>16}");
    }
    println!("{:<10} {:>14} {:>16}", "total", total_params, total_macs);
    println!("params {:.3}M  GFLOPs(MACs) {:.3}", total_params as f64 / 1e6, total_macs as f64 / 1e9);

    if let Some(dir) = &common.out {
        create_dir(dir)?;
        let mut w = csv::Writer::from_path(dir.join("params.csv"))?;
        w.write_record(["module", "params", "macs"])?;
        for (m, p, f) in rows.iter().chain(std::iter::once(&("total".to_string(), total_params, total_macs))) {
            w.write_record([m.clone(), p.to_string(), f.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn gradcheck(common: &Common, module: &str, corrupt: bool) -> Result<()> {
    let modules: Vec<&str> = match module {
        "all" => MODULES.to_vec(),
        m if MODULES.contains(&m) => vec![m],
        m => {
            return Err(Error::InvalidInput(format!("unknown module '{m}'; expected all or one of {}", MODULES.join(", "))));
        }
    };
    let seed = common.seed.unwrap_or(0);
    let opts = GradCheckOptions { corrupt, ..Default::default() };
    let mut failed = Vec::new();
    let mut rows = Vec::new();
    for m in modules {
        let report = check_module(m, seed, opts)?;
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {m:<18} max_rel_error={:.3e} tolerance={:.0e}", report.max_rel_error, report.tolerance);
        if !report.passed() {
            failed.push(m);
        }
        rows.push(report);
    }
    if let Some(dir) = &common.out {
        create_dir(dir)?;
        let mut w = csv::Writer::from_path(dir.join("gradcheck.csv"))?;
        w.write_record(["module", "param", "rel_error"])?;
        for r in &rows {
            for (p, e) in &r.per_param {
                w.write_record([r.module.clone(), p.clone(), format!("{e:.6e}")])?;
            }
        }
        w.flush()?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
