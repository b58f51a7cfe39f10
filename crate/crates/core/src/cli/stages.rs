use serde::{Deserialize, Serialize};

use super::{RunConfig, Stage};
use crate::analysis::{self, encode_mask_pgm, encode_pgm, hgr_by_layer, hgr_by_rib_iteration, NUM_MAPS};
use crate::error::{Error, Result};
use crate::eval::{mean_logit_increments, seed_from_map, sweep_adaptations, sweep_maps, SeedMetrics};
use crate::model::{self, decode_checkpoint, encode_checkpoint, ModelParams, PoolingMode, IMAGE_SIDE, NUM_CLASSES};
use crate::rib::{
    self, adapt_many, adapt_many_lenient, encode_map, encode_sidecar, parse_map, AdaptLoss, Adaptation,
    LocalizationMap, MapSidecar,
};
use crate::toydata::{self, decode_dataset, encode_dataset, Source, Split, ToyDataset, CLASS_DIGITS};

pub const DATASET: &str = "data/dataset.ribd";
pub const THETA0: &str = "pretrain/theta0.ribw";

fn rib_dir(p: PoolingMode) -> String {
    format!("rib_{}", p.name())
}

fn load_dataset(st: &mut Stage) -> Result<ToyDataset> {
    decode_dataset(&st.read(DATASET)?)
}

fn load_theta(st: &mut Stage) -> Result<ModelParams> {
    decode_checkpoint(&st.read(THETA0)?)
}

fn marked_eval(ds: &ToyDataset, n: usize) -> Result<Vec<usize>> {
    analysis::select_marked(ds, &ds.indices(Split::Eval), n)
}

#[derive(Serialize)]
struct ClassSummary {
    digit: u8,
    total: usize,
    marked: usize,
    eval: usize,
    eval_marked: usize,
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "gen-data", "data")?;
    if cfg.dataset.source == Source::Idx {
        for p in [&cfg.dataset.idx_images, &cfg.dataset.idx_labels].into_iter().flatten() {
            st.read_external(p)?;
        }
    }
    let ds = toydata::generate(&cfg.dataset)?;
    st.write("dataset.ribd", &encode_dataset(&ds))?;
    let all = ds.class_counts(None);
    let eval = ds.class_counts(Some(Split::Eval));
    let summary: Vec<ClassSummary> = (0..NUM_CLASSES)
        .map(|c| ClassSummary {
            digit: CLASS_DIGITS[c],
            total: all[c].0,
            marked: all[c].1,
            eval: eval[c].0,
            eval_marked: eval[c].1,
        })
        .collect();
    st.write_json("summary.json", &summary)?;
    println!("class  digit  samples  marked  eval  eval_marked");
    for (c, s) in summary.iter().enumerate() {
        println!(
            "{c:>5}  {:>5}  {:>7}  {:>6}  {:>4}  {:>11}",
            s.digit, s.total, s.marked, s.eval, s.eval_marked
        );
    }
    st.finish()?;
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "pretrain", "pretrain")?;
    let ds = load_dataset(&mut st)?;
    let (theta, log) = rib::pretrain(&ds, &cfg.pretrain_config())?;
    st.write("theta0.ribw", &encode_checkpoint(&theta))?;
    st.write_json("log.json", &log)?;
    for e in &log {
        println!(
            "epoch {:>2}  loss {:.4}  train acc {:.4}  eval acc {:.4}",
            e.epoch, e.loss, e.train_accuracy, e.eval_accuracy
        );
    }
    st.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct RibSummary {
    pooling: PoolingMode,
    images: Vec<usize>,
    mean_logits: Vec<f64>,
    mean_increments: Vec<f64>,
    fallback_count: usize,
}

pub fn rib(cfg: &RunConfig, jobs: usize) -> Result<()> {
    let rc = cfg.rib_config();
    let dir = rib_dir(rc.pooling);
    let mut st = Stage::begin(cfg, "rib", &dir)?;
    let ds = load_dataset(&mut st)?;
    let theta = load_theta(&mut st)?;
    let images = marked_eval(&ds, cfg.eval.n_images)?;
    let adapted = adapt_many(&images, &theta, &ds, &rc, AdaptLoss::Rib, jobs)?;
    for (&i, a) in images.iter().zip(&adapted) {
        let sidecar = MapSidecar {
            sample: i,
            class: a.map.class,
            k: a.map.k(),
            loss: AdaptLoss::Rib.name(),
            fallback_count: a.map.fallback_count,
            logits: a.logits.clone(),
            gap_logits: a.gap_logits.clone(),
            config: rc.clone(),
        };
        st.write(&format!("maps/{i:05}.ribm"), &encode_map(&a.map))?;
        st.write(&format!("maps/{i:05}.json"), &encode_sidecar(&sidecar))?;
    }
    let n = adapted.len() as f64;
    let summary = RibSummary {
        pooling: rc.pooling,
        images,
        mean_logits: (0..=rc.k)
            .map(|k| adapted.iter().map(|a| a.logits[k]).sum::<f64>() / n)
            .collect(),
        mean_increments: mean_logit_increments(&adapted),
        fallback_count: adapted.iter().map(|a| a.map.fallback_count).sum(),
    };
    st.write_json("summary.json", &summary)?;
    println!(
        "adapted {} images with {} (K={}, lr={}, B={}); mean labeled logit {:.3} -> {:.3}; gndrp fallbacks {}",
        summary.images.len(),
        rc.pooling.name(),
        rc.k,
        rc.lr,
        rc.batch,
        summary.mean_logits[0],
        summary.mean_logits[rc.k],
        summary.fallback_count
    );
    st.finish()?;
    Ok(())
}

fn print_hgr(report: &analysis::HgrReport, axis: &str) {
    println!("{axis:>9}  {:>7}  {:>7}  {:>7}", "D", "ND", "BG");
    let mut values: Vec<usize> = report.rows.iter().map(|r| r.axis_value).collect();
    values.dedup();
    for v in values {
        let cell = |r| report.get(v, r).map_or("-".into(), |h| format!("{h:.4}"));
        println!(
            "{v:>9}  {:>7}  {:>7}  {:>7}",
            cell(toydata::Region::D),
            cell(toydata::Region::Nd),
            cell(toydata::Region::Bg)
        );
    }
}

pub fn analyze_hgr(cfg: &RunConfig, jobs: usize) -> Result<()> {
    let mut st = Stage::begin(cfg, "analyze-hgr", "analysis")?;
    let ds = load_dataset(&mut st)?;
    let theta = load_theta(&mut st)?;
    let a = &cfg.analysis;
    let layers = hgr_by_layer(&theta, &ds, &ds.indices(Split::Eval), a, jobs)?;
    st.write("hgr_layers.csv", layers.to_csv().as_bytes())?;
    st.write_json("hgr_layers.json", &layers)?;
    println!("HGR by layer ({} images, threshold {})", layers.images.len(), a.threshold);
    print_hgr(&layers, "layer");

    let rc = cfg.rib_config();
    let images = marked_eval(&ds, a.n_images)?;
    let (iters, _) = hgr_by_rib_iteration(&theta, &ds, &images, &rc, AdaptLoss::Rib, a, jobs)?;
    let name = format!("hgr_iterations_{}", rc.pooling.name());
    st.write(&format!("{name}.csv"), iters.to_csv().as_bytes())?;
    st.write_json(&format!("{name}.json"), &iters)?;
    println!("HGR of G_{NUM_MAPS} by RIB iteration ({})", rc.pooling.name());
    print_hgr(&iters, "iteration");
    st.finish()?;
    Ok(())
}

fn load_maps(st: &mut Stage, p: PoolingMode) -> Result<Option<Vec<(usize, LocalizationMap)>>> {
    let rel_dir = format!("{}/maps", rib_dir(p));
    let dir = st.run_path(&rel_dir);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ribm"))
        .collect();
    names.sort();
    let mut maps = Vec::with_capacity(names.len());
    for n in names {
        let rel = format!("{rel_dir}/{n}");
        let bytes = st.read(&rel)?;
        let side = st.read(&rel.replace(".ribm", ".json"))?;
        let (lm, sidecar) = parse_map(&bytes, &side, &st.run_path(&rel))?;
        maps.push((sidecar.sample, lm));
    }
    if maps.is_empty() {
        return Err(Error::MissingArtifact(dir.join("*.ribm")));
    }
    Ok(Some(maps))
}

/// Best-sweep results of one method, as printed and stored by `eval-seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub k: usize,
    pub n_images: usize,
    pub best_threshold: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalSummary {
    fn new(method: &str, k: usize, m: &SeedMetrics) -> Self {
        let s = &m.best.score;
        EvalSummary {
            method: method.into(),
            k,
            n_images: m.n_images,
            best_threshold: m.best.threshold,
            miou: s.miou,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        }
    }
}

fn summary_csv(rows: &[EvalSummary]) -> String {
    let mut s = String::from("method,k,n_images,best_threshold,miou,precision,recall,f1\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method, r.k, r.n_images, r.best_threshold, r.miou, r.precision, r.recall, r.f1
        ));
    }
    s
}

pub fn eval_seed(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "eval-seed", "eval")?;
    let ds = load_dataset(&mut st)?;
    let thresholds = &cfg.eval.thresholds;
    let mut rows = Vec::new();
    let mut curves = String::from("method,k,best_threshold,miou\n");
    let mut found = false;
    for p in PoolingMode::ALL {
        let Some(maps) = load_maps(&mut st, p)? else { continue };
        let refs: Vec<(usize, &LocalizationMap)> = maps.iter().map(|(i, m)| (*i, m)).collect();
        let k = maps.iter().map(|(_, m)| m.k()).min().unwrap_or(0);
        if !found {
            let base = sweep_maps(&ds, &refs, Some(0), thresholds)?;
            st.write_json("sweep_cam.json", &base)?;
            st.write("sweep_cam.csv", base.to_csv().as_bytes())?;
            rows.push(EvalSummary::new("cam", 0, &base));
            found = true;
        }
        let full = sweep_maps(&ds, &refs, None, thresholds)?;
        st.write_json(&format!("sweep_{}.json", p.name()), &full)?;
        st.write(&format!("sweep_{}.csv", p.name()), full.to_csv().as_bytes())?;
        rows.push(EvalSummary::new(p.name(), k, &full));
        for kk in 0..=k {
            let m = sweep_maps(&ds, &refs, Some(kk), thresholds)?;
            curves.push_str(&format!("{},{kk},{},{}\n", p.name(), m.best.threshold, m.best_miou()));
        }
        for (i, lm) in &maps {
            let mask = seed_from_map(&lm.map, full.best.threshold);
            let pgm = encode_mask_pgm(&mask, lm.height, lm.width)?;
            st.write(&format!("seeds_{}/{i:05}.pgm", p.name()), &pgm)?;
        }
    }
    if !found {
        let want = st.run_path(&format!("{}/maps", rib_dir(PoolingMode::Gndrp)));
        return Err(Error::MissingArtifact(want));
    }
    st.write("comparison.csv", summary_csv(&rows).as_bytes())?;
    st.write_json("comparison.json", &rows)?;
    st.write("miou_by_k.csv", curves.as_bytes())?;
    println!("{:<8} {:>3} {:>6} {:>9} {:>7} {:>9} {:>7} {:>7}", "method", "K", "images", "threshold", "mIoU", "precision", "recall", "F1");
    for r in &rows {
        println!(
            "{:<8} {:>3} {:>6} {:>9.2} {:>7.4} {:>9.4} {:>7.4} {:>7.4}",
            r.method, r.k, r.n_images, r.best_threshold, r.miou, r.precision, r.recall, r.f1
        );
    }
    st.finish()?;
    Ok(())
}

/// One loss in the activation ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub loss: String,
    pub best_threshold: f64,
    pub miou: f64,
    pub f1: f64,
    /// Images whose CAM degenerated; they are scored with an empty seed.
    pub degenerate: usize,
    /// Averaged over the images that did not degenerate.
    pub mean_increments: Vec<f64>,
}

pub fn ablate_activations(cfg: &RunConfig, jobs: usize) -> Result<()> {
    let mut st = Stage::begin(cfg, "ablate-activations", "ablate")?;
    let ds = load_dataset(&mut st)?;
    let theta = load_theta(&mut st)?;
    let rc = cfg.rib_config();
    let images = marked_eval(&ds, cfg.ablate.n_images)?;
    let losses: Vec<AdaptLoss> = std::iter::once(AdaptLoss::Rib)
        .chain(cfg.ablate.kinds.iter().map(|&k| AdaptLoss::Bce(k)))
        .collect();
    let mut rows = Vec::with_capacity(losses.len());
    for loss in losses {
        let adapted = adapt_many_lenient(&images, &theta, &ds, &rc, loss, jobs)?;
        let m = sweep_adaptations(&ds, &images, &adapted, &cfg.eval.thresholds)?;
        let ok: Vec<Adaptation> = adapted.iter().flatten().cloned().collect();
        rows.push(AblationRow {
            loss: loss.name(),
            best_threshold: m.best.threshold,
            miou: m.best_miou(),
            f1: m.best.score.f1,
            degenerate: adapted.len() - ok.len(),
            mean_increments: mean_logit_increments(&ok),
        });
    }
    let mut csv = String::from("loss,best_threshold,miou,f1,degenerate,first_increment,last_increment\n");
    println!(
        "{:<16} {:>9} {:>7} {:>7} {:>10} {:>10} {:>10}",
        "loss", "threshold", "mIoU", "F1", "degenerate", "first step", "last step"
    );
    for r in &rows {
        let first = r.mean_increments.first().copied().unwrap_or(f64::NAN);
        let last = r.mean_increments.last().copied().unwrap_or(f64::NAN);
        csv.push_str(&format!(
            "{},{},{},{},{},{first},{last}\n",
            r.loss, r.best_threshold, r.miou, r.f1, r.degenerate
        ));
        println!(
            "{:<16} {:>9.2} {:>7.4} {:>7.4} {:>10} {first:>10.4} {last:>10.4}",
            r.loss, r.best_threshold, r.miou, r.f1, r.degenerate
        );
    }
    st.write("ablation.csv", csv.as_bytes())?;
    st.write_json("ablation.json", &rows)?;
    st.finish()?;
    Ok(())
}

pub fn scratch_rib(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "scratch-rib", "scratch")?;
    let ds = load_dataset(&mut st)?;
    let log = rib::train_from_scratch_rib(&ds, &cfg.scratch)?;
    st.write_json("log.json", &log)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in log.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    st.write("losses.csv", csv.as_bytes())?;
    for (e, l) in log.epoch_losses.iter().enumerate() {
        println!("epoch {e}  mean loss {l:.4e}");
    }
    let level = -10.0 * cfg.rib_config().margin;
    match log.first_step_below(level) {
        Some(s) => println!("loss reached {level} at step {s}"),
        None => println!("loss never reached {level}"),
    }
    if let Some(s) = log.terminated_at_step {
        println!("stopped on a non-finite value at step {s}");
    }
    st.finish()?;
    Ok(())
}

pub fn render(cfg: &RunConfig) -> Result<()> {
    let mut st = Stage::begin(cfg, "render", "render")?;
    let ds = load_dataset(&mut st)?;
    let theta = load_theta(&mut st)?;
    let images = marked_eval(&ds, cfg.render.n_images)?;
    let (h, w) = (IMAGE_SIDE, IMAGE_SIDE);
    let mut count = 0;
    for &i in &images {
        let s = &ds.samples[i];
        let x = s.tensor();
        let mut files = vec![("input".to_string(), s.pixels.clone())];
        let g = analysis::gradient_maps(&theta, &x, s.class, cfg.analysis.norm)?;
        for l in 1..=NUM_MAPS {
            files.push((format!("g{l}"), g.layer(l).to_vec()));
        }
        files.push(("cam".into(), model::cam(&theta, &x, s.class)?.normalized));
        for p in PoolingMode::ALL {
            let rel = format!("{}/maps/{i:05}.ribm", rib_dir(p));
            if st.run_path(&rel).exists() {
                let bytes = st.read(&rel)?;
                let side = st.read(&rel.replace(".ribm", ".json"))?;
                let (lm, _) = parse_map(&bytes, &side, &st.run_path(&rel))?;
                files.push((format!("m_{}", p.name()), lm.map));
            }
        }
        for (name, values) in files {
            st.write(&format!("{i:05}_{name}.pgm"), &encode_pgm(&values, h, w)?)?;
            count += 1;
        }
        st.write(&format!("{i:05}_truth.pgm"), &encode_mask_pgm(&s.foreground(), h, w)?)?;
        count += 1;
    }
    println!("wrote {count} {w}x{h} PGM files for {} images", images.len());
    st.finish()?;
    Ok(())
}

/// Every stage in order, adapting with both poolings.
pub fn pipeline(cfg: &RunConfig, jobs: usize) -> Result<()> {
    gen_data(cfg)?;
    pretrain(cfg)?;
    for p in PoolingMode::ALL {
        let mut c = cfg.clone();
        c.rib.pooling = Some(p);
        rib(&c, jobs)?;
    }
    analyze_hgr(cfg, jobs)?;
    eval_seed(cfg)?;
    ablate_activations(cfg, jobs)?;
    scratch_rib(cfg)?;
    render(cfg)
}
