//! End-to-end swap, skin fix, evaluation and ablation on top of a [`Model`].

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::{eval_triples, read_part_masks, view_name, Corpus, Triple};
use crate::diffusion::{ddim_invert_trajectory, ddim_sample_seeded, gaussian, skin_latent_replace, DdimConfig};
use crate::error::{Error, Result};
use crate::fusion::{PartSource, SwapSpec};
use crate::image::{read_image, Image};
use crate::injection::InjectionMode;
use crate::mask::{Mask, Part, PartMaskSet};
use crate::metrics::{face_feature, fid, fmt_value, fpsim, mse, MetricReport};
use crate::model::{ddim_config, from_latent, to_latent, BoundModel, Model};
use crate::tensor::Tensor;
use crate::train::Trainer;

/// Generated image, its latent, and the 2×2 comparison grid.
pub struct SwapResult {
    pub image: Image,
    pub latent: Tensor<f32>,
    pub grid: Image,
}

/// Target with every swapped source part pasted at its source location.
pub fn naive_composite(target: &Image, spec: &SwapSpec) -> Result<Image> {
    let mut out = target.clone();
    for part in spec.replaced() {
        let src = spec.get(part).expect("replaced part");
        out = out.composite(&src.image, &src.mask)?;
    }
    Ok(out)
}

/// Grid of target | output over naive composite | |output − target|.
pub fn comparison_grid(target: &Image, output: &Image, spec: &SwapSpec) -> Result<Image> {
    let naive = naive_composite(target, spec)?;
    let diff = output.abs_diff(target)?;
    Image::tile(&[target, output, &naive, &diff], 2)
}

/// Decompose, transplant, aggregate, sample and decode. The output image is
/// quantized to 8 bits, as written to disk.
pub fn swap(model: &Model, target: &Image, masks: &PartMaskSet, spec: &SwapSpec, ddim: &DdimConfig) -> Result<SwapResult> {
    let bound = BoundModel::new(&model.cfg, &model.store, target, masks, spec)?;
    let schedule = model.cfg.schedule()?;
    let latent = ddim_sample_seeded(&bound, &model.cfg.latent_shape(), &schedule, ddim)?;
    let image = from_latent(&model.cfg.codec, &latent)?.quantized();
    let grid = comparison_grid(target, &image, spec)?;
    Ok(SwapResult { image, latent, grid })
}

/// Re-runs the swap while, for the first `threshold` steps, replacing the
/// latent cells under `skin` with the target's inverted trajectory.
pub fn invert_fix(
    model: &Model,
    target: &Image,
    masks: &PartMaskSet,
    spec: &SwapSpec,
    skin: &Mask,
    threshold: usize,
    ddim: &DdimConfig,
) -> Result<Image> {
    target.check_mask(skin)?;
    let bound = BoundModel::new(&model.cfg, &model.store, target, masks, spec)?;
    let schedule = model.cfg.schedule()?;
    let side = model.cfg.latent_side();
    let z0 = to_latent::<f32>(&model.cfg.codec, target)?;
    let traj = ddim_invert_trajectory(&bound, &z0, &schedule, ddim)?;
    let start = gaussian(&model.cfg.latent_shape(), ddim.seed);
    let z = skin_latent_replace(&bound, start, &traj, &skin.downsample(side, side)?, threshold, &schedule, ddim)?;
    Ok(from_latent(&model.cfg.codec, &z)?.quantized())
}

/// Mean absolute latent error of invert-then-sample for reconstruction of
/// `target` under its own conditioning.
pub fn inversion_error(model: &Model, target: &Image, masks: &PartMaskSet, ddim: &DdimConfig) -> Result<f64> {
    let bound = BoundModel::new(&model.cfg, &model.store, target, masks, &SwapSpec::none())?;
    let schedule = model.cfg.schedule()?;
    let z0 = to_latent::<f32>(&model.cfg.codec, target)?;
    let zt = crate::diffusion::ddim_invert(&bound, &z0, &schedule, ddim)?;
    let back = crate::diffusion::ddim_sample(&bound, zt, &schedule, ddim)?;
    let n = z0.data().len() as f64;
    Ok(z0.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / n)
}

/// A source image with the masks of all its parts.
#[derive(Clone, Debug)]
pub struct View {
    pub image: Image,
    pub masks: PartMaskSet,
}

/// One evaluation case: a target and an optional source per swappable part.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub name: String,
    pub target: View,
    pub sources: [Option<View>; 3],
}

impl EvalCase {
    pub fn spec(&self) -> SwapSpec {
        let mut spec = SwapSpec::none();
        for (part, src) in Part::SWAPPABLE.into_iter().zip(&self.sources) {
            if let Some(v) = src {
                spec.set(part, PartSource { image: v.image.clone(), mask: v.masks.get(part).clone() }).expect("swappable part");
            }
        }
        spec
    }

    /// Target pixels outside every swapped part.
    pub fn unswapped_region(&self) -> Result<Mask> {
        let (h, w) = self.target.image.dims();
        let mut swapped = Mask::zeros(h, w);
        for (part, src) in Part::SWAPPABLE.into_iter().zip(&self.sources) {
            if src.is_some() {
                swapped = swapped.or(self.target.masks.get(part))?;
            }
        }
        Ok(swapped.complement())
    }
}

/// Per-case scores behind a [`MetricReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct CaseScore {
    /// FPSim of each swapped part against its source.
    pub to_source: [Option<f64>; 3],
    /// FPSim of each swapped part against the target's own part.
    pub to_target: [Option<f64>; 3],
    pub mse_unswapped: f64,
    pub mse_full: f64,
}

impl CaseScore {
    /// Every swapped part resembles its source more than the target.
    pub fn ordering_holds(&self) -> bool {
        self.to_source.iter().zip(&self.to_target).all(|(s, t)| match (s, t) {
            (Some(s), Some(t)) => s > t,
            _ => true,
        })
    }

    pub fn part_ordering(&self, part: Part) -> Option<bool> {
        let k = part.index();
        Some(self.to_source.get(k).copied().flatten()? > self.to_target[k]?)
    }
}

pub fn score_case(case: &EvalCase, output: &Image) -> Result<CaseScore> {
    let mut to_source = [None; 3];
    let mut to_target = [None; 3];
    for (k, part) in Part::SWAPPABLE.into_iter().enumerate() {
        if let Some(src) = &case.sources[k] {
            let out_mask = case.target.masks.get(part);
            to_source[k] = Some(fpsim(output, out_mask, &src.image, src.masks.get(part))?);
            to_target[k] = Some(fpsim(output, out_mask, &case.target.image, out_mask)?);
        }
    }
    Ok(CaseScore {
        to_source,
        to_target,
        mse_unswapped: mse(output, &case.target.image, Some(&case.unswapped_region()?))?,
        mse_full: mse(output, &case.target.image, None)?,
    })
}

/// Aggregates per-case scores and the FID between output and target faces.
pub fn score(cases: &[EvalCase], outputs: &[Image]) -> Result<(MetricReport, Vec<CaseScore>)> {
    if cases.is_empty() || cases.len() != outputs.len() {
        return Err(Error::Contract(format!("{} cases for {} outputs", cases.len(), outputs.len())));
    }
    let scores: Vec<CaseScore> = cases.par_iter().zip(outputs).map(|(c, o)| score_case(c, o)).collect::<Result<_>>()?;
    let out_feats: Vec<Vec<f64>> = outputs.par_iter().map(face_feature).collect::<Result<_>>()?;
    let tgt_feats: Vec<Vec<f64>> = cases.par_iter().map(|c| face_feature(&c.target.image)).collect::<Result<_>>()?;
    let mut fpsim_mean = [None; 3];
    let mut part_counts = [0; 3];
    for k in 0..3 {
        let vals: Vec<f64> = scores.iter().filter_map(|s| s.to_source[k]).collect();
        part_counts[k] = vals.len();
        if !vals.is_empty() {
            fpsim_mean[k] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    let report = MetricReport {
        fid: fid(&out_feats, &tgt_feats)?,
        fpsim: fpsim_mean,
        mse: scores.iter().map(|s| s.mse_unswapped).sum::<f64>() / scores.len() as f64,
        samples: scores.len(),
        part_counts,
    };
    Ok((report, scores))
}

/// Swaps every case with DDIM seed `ddim.seed + index`.
pub fn run_cases(model: &Model, cases: &[EvalCase], ddim: &DdimConfig) -> Result<Vec<Image>> {
    cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let cfg = DdimConfig { seed: ddim.seed.wrapping_add(i as u64), ..*ddim };
            Ok(swap(model, &c.target.image, &c.target.masks, &c.spec(), &cfg)?.image)
        })
        .collect()
}

pub fn evaluate(model: &Model, cases: &[EvalCase], ddim: &DdimConfig) -> Result<(MetricReport, Vec<CaseScore>)> {
    let outputs = run_cases(model, cases, ddim)?;
    score(cases, &outputs)
}

/// One manifest line: a target view and an optional source view per part,
/// each a path prefix relative to the data directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub target: String,
    pub sources: [Option<String>; 3],
}

pub const MANIFEST_HEADER: &str = "target\teyes\tnose\tmouth";

pub fn render_eval_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        let src = e.sources.clone().map(|s| s.unwrap_or_else(|| "-".into()));
        let _ = writeln!(out, "{}\t{}", e.target, src.join("\t"));
    }
    out
}

pub fn parse_eval_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') || line == MANIFEST_HEADER {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 || cols[0] == "-" {
            return Err(Error::Data(format!("eval manifest line {}: expected target and three source columns", n + 1)));
        }
        let opt = |s: &str| (s != "-").then(|| s.to_string());
        out.push(ManifestEntry { target: cols[0].into(), sources: [opt(cols[1]), opt(cols[2]), opt(cols[3])] });
    }
    if out.is_empty() {
        return Err(Error::Data("eval manifest has no entries".into()));
    }
    Ok(out)
}

/// Manifest entries for `triples`, swapping only the parts in `parts`.
pub fn triples_manifest(triples: &[Triple], parts: &[Part]) -> Vec<ManifestEntry> {
    triples
        .iter()
        .map(|t| ManifestEntry {
            target: view_name(t.target.0, t.target.1),
            sources: std::array::from_fn(|k| {
                parts.contains(&Part::SWAPPABLE[k]).then(|| view_name(t.sources[k].0, t.sources[k].1))
            }),
        })
        .collect()
}

/// Held-out triples from `data.holdout` upward, selected by `eval.seed`.
pub fn held_out_triples(run: &RunConfig, corpus: &Corpus, n: usize) -> Result<Vec<Triple>> {
    let holdout = run.u64("data.holdout")?;
    let ids: Vec<u64> = (holdout..corpus.identities() as u64).collect();
    eval_triples(&ids, corpus.views, n, run.u64("eval.seed")?)
}

pub fn load_view(dir: &Path, prefix: &str) -> Result<View> {
    let base = dir.join(prefix);
    let mut img = base.as_os_str().to_owned();
    img.push(".ppm");
    let image = read_image(Path::new(&img))?;
    let masks = read_part_masks(&base)?;
    if masks.dims() != image.dims() {
        return Err(Error::Data(format!("{prefix}: masks {:?} vs image {:?}", masks.dims(), image.dims())));
    }
    Ok(View { image, masks })
}

pub fn load_cases(dir: &Path, entries: &[ManifestEntry]) -> Result<Vec<EvalCase>> {
    entries
        .par_iter()
        .map(|e| {
            let mut sources: [Option<View>; 3] = [None, None, None];
            for (slot, s) in sources.iter_mut().zip(&e.sources) {
                if let Some(p) = s {
                    *slot = Some(load_view(dir, p)?);
                }
            }
            Ok(EvalCase { name: e.target.clone(), target: load_view(dir, &e.target)?, sources })
        })
        .collect()
}

/// Cases straight from an in-memory corpus.
pub fn corpus_cases(corpus: &Corpus, triples: &[Triple], parts: &[Part]) -> Result<Vec<EvalCase>> {
    let view = |(id, v): (u64, usize)| -> Result<View> {
        let s = corpus.get(id, v)?;
        Ok(View { image: s.image.clone(), masks: s.masks.clone() })
    };
    triples
        .iter()
        .map(|t| {
            let mut sources: [Option<View>; 3] = [None, None, None];
            for (k, part) in Part::SWAPPABLE.into_iter().enumerate() {
                if parts.contains(&part) {
                    sources[k] = Some(view(t.sources[k])?);
                }
            }
            Ok(EvalCase { name: view_name(t.target.0, t.target.1), target: view(t.target)?, sources })
        })
        .collect()
}

/// One ablation row.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: InjectionMode,
    pub report: MetricReport,
    pub final_loss: f64,
}

pub const ABLATION_HEADER: &str = "mode\tFID\tFPSim-E\tFPSim-N\tFPSim-M\tMSE\tfinal_loss";

/// Trains every injection mode from scratch for `ablate.steps` and
/// evaluates three-part swaps on `ablate.triples` held-out triples.
pub fn ablate(run: &RunConfig, corpus: &Corpus, progress: &mut dyn FnMut(&str)) -> Result<Vec<AblationRow>> {
    let steps = run.get("ablate.steps")?.to_string();
    let triples = held_out_triples(run, corpus, run.usize("ablate.triples")?)?;
    let cases = corpus_cases(corpus, &triples, &Part::SWAPPABLE)?;
    let mut rows = Vec::with_capacity(InjectionMode::ALL.len());
    for mode in InjectionMode::ALL {
        let mut cfg = run.clone();
        cfg.set("inject.mode", &mode.to_string())?;
        cfg.set("train.steps", &steps)?;
        let mut model = Model::new(&cfg)?;
        let losses = Trainer::new(&mut model, corpus)?.run(None, &mut std::io::sink())?;
        let tail = &losses[losses.len().saturating_sub(10)..];
        let final_loss = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };
        let (report, _) = evaluate(&model, &cases, &ddim_config(&cfg)?)?;
        progress(&format!("{mode}: loss {final_loss:.4}"));
        rows.push(AblationRow { mode, report, final_loss });
    }
    Ok(rows)
}

/// Mean FPSim over the three parts, skipping missing ones.
fn mean_fpsim(r: &MetricReport) -> f64 {
    let v: Vec<f64> = r.fpsim.iter().flatten().copied().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let vals: Vec<String> = r.report.row().iter().map(|&v| fmt_value(v)).collect();
        let _ = writeln!(out, "{}\t{}\t{}", r.mode, vals.join("\t"), fmt_value(r.final_loss));
    }
    let find = |m: InjectionMode| rows.iter().find(|r| r.mode == m);
    if let (Some(a), Some(c)) = (find(InjectionMode::AddInCA), find(InjectionMode::CrossAttn)) {
        let (fa, fc) = (mean_fpsim(&a.report), mean_fpsim(&c.report));
        let verdict = if fa > fc { "holds" } else { "does not hold" };
        let _ = writeln!(
            out,
            "# mean FPSim {} {} vs {} {} (difference {}); expectation add-in-ca > cross-attn {verdict}",
            InjectionMode::AddInCA,
            fmt_value(fa),
            InjectionMode::CrossAttn,
            fmt_value(fc),
            fmt_value(fa - fc)
        );
    }
    out
}

/// Parses the rows of [`render_ablation`] back to `(mode, metrics, final_loss)`.
pub fn parse_ablation(text: &str) -> Result<Vec<(InjectionMode, [f64; 5], f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(Error::Data("ablation report: missing header".into()));
    }
    let num = |s: &str| -> Result<f64> {
        if s == "nan" {
            Ok(f64::NAN)
        } else {
            s.parse().map_err(|_| Error::Data(format!("ablation report: bad value {s:?}")))
        }
    };
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(Error::Data(format!("ablation report: {} columns in {line:?}", cols.len())));
        }
        let mode: InjectionMode = cols[0].parse().map_err(|e: Error| Error::Data(e.to_string()))?;
        let mut vals = [0.0; 5];
        for (v, s) in vals.iter_mut().zip(&cols[1..6]) {
            *v = num(s)?;
        }
        out.push((mode, vals, num(cols[6])?));
    }
    Ok(out)
}
