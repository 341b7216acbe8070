//! Evaluation metrics: part similarity, Fréchet distance and masked MSE.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{dim_err, Error, Result};
use crate::image::Image;
use crate::mask::{Mask, Part};
use crate::tensor::{bilinear_resize, Tensor};

pub const EMBED_SIDE: usize = 16;
pub const EMBED_DIM: usize = 3 * EMBED_SIDE * EMBED_SIDE;
/// Diagonal shrinkage added to covariances estimated from few samples.
pub const SHRINKAGE: f64 = 1e-6;

/// Maps a masked image region to a feature vector.
pub trait PartEmbedder {
    fn embed(&self, img: &Image, m: &Mask) -> Result<Vec<f64>>;
}

/// Bounding-box crop, bilinear resize to 16×16, mean subtraction and L2
/// normalization.
#[derive(Clone, Copy, Debug, Default)]
pub struct CropEmbed;

impl PartEmbedder for CropEmbed {
    fn embed(&self, img: &Image, m: &Mask) -> Result<Vec<f64>> {
        part_embed(img, m)
    }
}

pub fn part_embed(img: &Image, m: &Mask) -> Result<Vec<f64>> {
    img.check_mask(m)?;
    let r = m.bbox()?;
    let (h, w) = img.dims();
    let crop = Tensor::from_fn(&[3, r.height(), r.width()], |i| {
        let (ch, rest) = (i / (r.height() * r.width()), i % (r.height() * r.width()));
        let (y, x) = (r.r0 + rest / r.width(), r.c0 + rest % r.width());
        img.data()[(ch * h + y) * w + x] as f64
    });
    let mut v = bilinear_resize(&crop, EMBED_SIDE, EMBED_SIDE)?.into_data();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err!("cosine of vectors with {} and {} entries", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((dot / (na * nb).max(1e-12)).clamp(-1.0, 1.0))
}

/// Cosine similarity of the part embeddings of two masked images.
pub fn fpsim(gen: &Image, gen_mask: &Mask, reference: &Image, ref_mask: &Mask) -> Result<f64> {
    fpsim_with(&CropEmbed, gen, gen_mask, reference, ref_mask)
}

pub fn fpsim_with(e: &dyn PartEmbedder, gen: &Image, gen_mask: &Mask, reference: &Image, ref_mask: &Mask) -> Result<f64> {
    cosine(&e.embed(gen, gen_mask)?, &e.embed(reference, ref_mask)?)
}

/// Whole-face feature used for FID.
pub fn face_feature(img: &Image) -> Result<Vec<f64>> {
    let (h, w) = img.dims();
    part_embed(img, &Mask::ones(h, w))
}

/// Mean squared channel difference over all pixels or over `region`.
pub fn mse(a: &Image, b: &Image, region: Option<&Mask>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(dim_err!("mse of {:?} and {:?} images", a.dims(), b.dims()));
    }
    let (h, w) = a.dims();
    let plane = h * w;
    if let Some(m) = region {
        a.check_mask(m)?;
        if m.is_empty() {
            return Err(Error::EmptyRegion("mse over an empty region".into()));
        }
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if region.is_none_or(|m| m.cells()[i % plane] == 1) {
            let d = (*x - *y) as f64;
            acc += d * d;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Mean and covariance of a sample set (divisor n−1; zero covariance for one
/// sample), with shrinkage when the sample count does not exceed the dimension.
pub fn gaussian_stats(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    if n == 0 {
        return Err(Error::Contract("statistics of an empty sample set".into()));
    }
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return Err(dim_err!("feature vectors of unequal length"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let mut cov = if n > 1 { centered.transpose() * &centered / (n - 1) as f64 } else { DMatrix::zeros(d, d) };
    if n <= d {
        for j in 0..d {
            cov[(j, j)] += SHRINKAGE;
        }
    }
    Ok((mu, cov))
}

/// Principal square root of a symmetric positive semi-definite matrix, with
/// negative eigenvalues clamped to zero.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(dim_err!("square root of a {}x{} matrix", a.nrows(), a.ncols()));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// ‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½).
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(dim_err!("Fréchet distance between statistics of mismatched dimension"));
    }
    let r1 = sqrtm_psd(s1)?;
    let cross = sqrtm_psd(&(&r1 * s2 * &r1))?;
    let v = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite Fréchet distance".into()));
    }
    Ok(v)
}

pub fn fid(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_stats(feats_a)?;
    let (m2, s2) = gaussian_stats(feats_b)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

/// Aggregated evaluation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub fid: f64,
    /// Mean FPSim for eyes, nose and mouth; `None` when no sample swapped the part.
    pub fpsim: [Option<f64>; 3],
    pub mse: f64,
    pub samples: usize,
    pub part_counts: [usize; 3],
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 5] = ["FID", "FPSim-E", "FPSim-N", "FPSim-M", "MSE"];

    pub fn fpsim(&self, part: Part) -> Option<f64> {
        Part::SWAPPABLE.iter().position(|&p| p == part).and_then(|i| self.fpsim[i])
    }

    /// Column values in [`Self::COLUMNS`] order, NaN for missing parts.
    pub fn row(&self) -> [f64; 5] {
        let f = |i: usize| self.fpsim[i].unwrap_or(f64::NAN);
        [self.fid, f(0), f(1), f(2), self.mse]
    }

    pub fn render(&self) -> String {
        let mut s = String::from("metric\tpart\tvalue\n");
        let _ = writeln!(s, "fid\tface\t{}", fmt_value(self.fid));
        for (i, part) in Part::SWAPPABLE.iter().enumerate() {
            if let Some(v) = self.fpsim[i] {
                let _ = writeln!(s, "fpsim\t{part}\t{}", fmt_value(v));
            }
        }
        let _ = writeln!(s, "mse\tface\t{}", fmt_value(self.mse));
        s.push_str("\n[summary]\n");
        let _ = writeln!(s, "samples\t{}", self.samples);
        for (i, part) in Part::SWAPPABLE.iter().enumerate() {
            let _ = writeln!(s, "swapped.{part}\t{}", self.part_counts[i]);
        }
        s.push_str(&Self::COLUMNS.join("\t"));
        s.push('\n');
        let row: Vec<String> = self.row().iter().map(|v| fmt_value(*v)).collect();
        s.push_str(&row.join("\t"));
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Data(format!("metric report: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some("metric\tpart\tvalue") {
            return Err(bad("missing header".into()));
        }
        let mut fid = None;
        let mut mse = None;
        let mut fp = [None; 3];
        let mut samples = None;
        let mut counts = [0usize; 3];
        let mut in_summary = false;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if line == "[summary]" {
                in_summary = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if in_summary {
                match cols.as_slice() {
                    ["samples", v] => samples = Some(v.parse().map_err(|_| bad(format!("bad sample count {v:?}")))?),
                    [k, v] if k.starts_with("swapped.") => {
                        let part: Part = k["swapped.".len()..].parse()?;
                        let i = part.index();
                        *counts.get_mut(i).ok_or_else(|| bad(format!("bad part {k}")))? =
                            v.parse().map_err(|_| bad(format!("bad count {v:?}")))?;
                    }
                    _ => {}
                }
                continue;
            }
            let [metric, part, value] = cols.as_slice() else {
                return Err(bad(format!("malformed line {line:?}")));
            };
            let v: f64 = value.parse().map_err(|_| bad(format!("bad value {value:?}")))?;
            match *metric {
                "fid" => fid = Some(v),
                "mse" => mse = Some(v),
                "fpsim" => {
                    let p: Part = part.parse()?;
                    *fp.get_mut(p.index()).ok_or_else(|| bad(format!("fpsim for {p}")))? = Some(v);
                }
                _ => return Err(bad(format!("unknown metric {metric:?}"))),
            }
        }
        Ok(Self {
            fid: fid.ok_or_else(|| bad("missing fid".into()))?,
            fpsim: fp,
            mse: mse.ok_or_else(|| bad("missing mse".into()))?,
            samples: samples.ok_or_else(|| bad("missing summary".into()))?,
            part_counts: counts,
        })
    }
}

pub fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn embedding_examples() {
        let img = random_image(20, 20, 1);
        let m = Mask::from_fn(20, 20, |r, c| (3..15).contains(&r) && (5..11).contains(&c));
        let e = part_embed(&img, &m).unwrap();
        assert_eq!(e.len(), EMBED_DIM);
        assert_eq!(e, part_embed(&img, &m).unwrap());
        let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(matches!(part_embed(&img, &Mask::zeros(20, 20)), Err(Error::EmptyRegion(_))));
        let flat = part_embed(&Image::filled(20, 20, [0.4; 3]), &m).unwrap();
        assert!(flat.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn constant_color_crops_follow_closed_form() {
        let (c1, c2) = ([0.9f32, 0.2, 0.1], [0.1f32, 0.3, 0.8]);
        let a = Image::filled(8, 8, c1);
        let b = Image::filled(8, 8, c2);
        let m = Mask::ones(8, 8);
        let got = fpsim(&a, &m, &b, &m).unwrap();
        let center = |c: [f32; 3]| {
            let c = c.map(|v| v as f64);
            let mean = (c[0] + c[1] + c[2]) / 3.0;
            c.map(|v| v - mean)
        };
        let (u, v) = (center(c1), center(c2));
        let dot: f64 = (0..3).map(|i| u[i] * v[i]).sum();
        let nu = (0..3).map(|i| u[i] * u[i]).sum::<f64>().sqrt();
        let nv = (0..3).map(|i| v[i] * v[i]).sum::<f64>().sqrt();
        assert!((got - dot / (nu * nv)).abs() < 1e-6);
    }

    #[test]
    fn cosine_examples() {
        let s = 1.0 / 2f64.sqrt();
        assert!((cosine(&[1.0, 0.0], &[s, s]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-12);
        let img = random_image(10, 10, 2);
        let m = Mask::from_fn(10, 10, |r, _| r < 5);
        assert!((fpsim(&img, &m, &img, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let a = random_image(6, 6, 3);
        assert_eq!(mse(&a, &a, None).unwrap(), 0.0);
        let shifted = Image::new(6, 6, a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((mse(&a, &shifted, None).unwrap() - 0.01).abs() < 1e-7);
        let m = Mask::from_fn(6, 6, |r, _| r < 3);
        let mut b = a.clone();
        for ch in 0..3 {
            b.set(ch, 5, 5, 1.0 - a.get(ch, 5, 5));
        }
        assert_eq!(mse(&a, &b, Some(&m)).unwrap(), 0.0);
        assert!(mse(&a, &b, None).unwrap() > 0.0);
        assert!(mse(&a, &random_image(5, 6, 1), None).is_err());
    }

    fn random_spd(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn sqrtm_reconstructs_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d = rng.gen_range(1..12);
            let s = random_spd(d, &mut rng);
            let r = sqrtm_psd(&s).unwrap();
            assert!((&r * &r - &s).norm() < 1e-8);
        }
    }

    #[test]
    fn fid_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..25).map(|_| (0..6).map(|_| rng.gen_range(-0.5..2.0)).collect()).collect();
        assert!(fid(&a, &a).unwrap().abs() < 1e-8);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-8);
        let mut perm = a.clone();
        perm.reverse();
        assert!((fid(&perm, &b).unwrap() - ab).abs() < 1e-8);

        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let d = frechet_distance(&DVector::from_element(1, 0.0), &one(1.0), &DVector::from_element(1, 1.0), &one(1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-6);
        // (μ₁−μ₂)² + (σ₁−σ₂)² for σ = 1 and 2
        let d = frechet_distance(&DVector::from_element(1, 0.5), &one(1.0), &DVector::from_element(1, 0.0), &one(4.0)).unwrap();
        assert!((d - 1.25).abs() < 1e-12);
        assert!(matches!(fid(&[], &a), Err(Error::Contract(_))));
    }

    #[test]
    fn report_round_trips() {
        let r = MetricReport {
            fid: 1.5,
            fpsim: [Some(0.25), None, Some(-0.5)],
            mse: 0.125,
            samples: 7,
            part_counts: [3, 0, 7],
        };
        let text = r.render();
        assert!(text.starts_with("metric\tpart\tvalue\nfid\tface\t1.500000\n"));
        assert!(text.contains("FID\tFPSim-E\tFPSim-N\tFPSim-M\tMSE\n1.500000\t0.250000\tnan\t-0.500000\t0.125000\n"));
        assert_eq!(MetricReport::parse(&text).unwrap(), r);
        assert!(MetricReport::parse("fid\tface\t1\n").is_err());
    }
}
