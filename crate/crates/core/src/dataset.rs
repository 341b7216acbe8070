//! Synthetic corpus on disk: `id_<n>/view_<k>.ppm` with per-part PGM masks
//! and a flat manifest of face parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{read_image, read_mask, write_image, write_mask, Image};
use crate::mask::{Mask, Part, PartMaskSet};
use crate::synth::{self, FaceParams, JitterRanges};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub identities: usize,
    pub views: usize,
    pub size: usize,
    pub jitter: JitterRanges,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { seed: 0, identities: 512, views: 8, size: 64, jitter: JitterRanges::default() }
    }
}

/// Seed of view `k` of identity `id` under corpus seed `seed`.
pub fn view_seed(seed: u64, id: u64, view: usize) -> u64 {
    let mut x = seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (view as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

pub fn view_name(id: u64, view: usize) -> String {
    format!("id_{id}/view_{view}")
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u64,
    pub view: usize,
    pub params: FaceParams,
    pub image: Image,
    pub masks: PartMaskSet,
    pub skin: Mask,
}

impl Sample {
    pub fn name(&self) -> String {
        view_name(self.id, self.view)
    }
}

/// All views of all identities, ordered by id then view.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub size: usize,
    pub views: usize,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        if spec.identities == 0 || spec.views == 0 {
            return Err(Error::Config("corpus needs at least one identity and one view".into()));
        }
        let per_id: Vec<Vec<Sample>> = (0..spec.identities as u64)
            .into_par_iter()
            .map(|id| {
                let base = synth::sample_identity(id);
                (0..spec.views)
                    .map(|view| {
                        let params = synth::perturb(&base, view_seed(spec.seed, id, view), &spec.jitter);
                        let r = synth::render(&params, spec.size)?;
                        Ok(Sample { id, view, params, image: r.image, masks: r.masks, skin: r.skin })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self { size: spec.size, views: spec.views, samples: per_id.into_iter().flatten().collect() })
    }

    pub fn identities(&self) -> usize {
        self.samples.len() / self.views
    }

    pub fn get(&self, id: u64, view: usize) -> Result<&Sample> {
        let i = id as usize * self.views + view;
        self.samples
            .get(i)
            .filter(|s| s.id == id && s.view == view)
            .ok_or_else(|| Error::Data(format!("corpus has no {}", view_name(id, view))))
    }

    pub fn views_of(&self, id: u64) -> &[Sample] {
        let i = id as usize * self.views;
        &self.samples[i..i + self.views]
    }

    pub fn write(&self, dir: &Path, spec: &CorpusSpec) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "# synthetic face corpus");
        for (k, v) in [
            ("corpus.seed", spec.seed.to_string()),
            ("corpus.identities", spec.identities.to_string()),
            ("corpus.views", spec.views.to_string()),
            ("corpus.size", spec.size.to_string()),
        ] {
            let _ = writeln!(manifest, "{k} = {v}");
        }
        for s in &self.samples {
            let id_dir = dir.join(format!("id_{}", s.id));
            std::fs::create_dir_all(&id_dir).map_err(|e| Error::io(&id_dir, e))?;
            write_image(&id_dir.join(format!("view_{}.ppm", s.view)), &s.image)?;
            for part in Part::SWAPPABLE {
                write_mask(&id_dir.join(format!("view_{}_{part}.pgm", s.view)), s.masks.get(part))?;
            }
            for (k, v) in s.params.to_records(&s.name()) {
                let _ = writeln!(manifest, "{k} = {v}");
            }
        }
        let path = dir.join(MANIFEST);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let map = parse_manifest(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let num = |k: &str| -> Result<usize> {
            map.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: missing or bad {k}", path.display())))
        };
        let (identities, views, size) = (num("corpus.identities")?, num("corpus.views")?, num("corpus.size")?);
        if identities == 0 || views == 0 {
            return Err(Error::Data(format!("{}: empty corpus", path.display())));
        }
        let samples = (0..identities as u64)
            .into_par_iter()
            .flat_map_iter(|id| (0..views).map(move |view| (id, view)))
            .map(|(id, view)| load_sample(dir, &map, id, view, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { size, views, samples })
    }
}

fn load_sample(dir: &Path, map: &BTreeMap<String, String>, id: u64, view: usize, size: usize) -> Result<Sample> {
    let name = view_name(id, view);
    let params = FaceParams::from_records(map, &name)?;
    let image = read_image(&dir.join(format!("{name}.ppm")))?;
    if image.dims() != (size, size) {
        return Err(Error::Data(format!("{name}: image is {:?}, corpus size {size}", image.dims())));
    }
    let masks = read_part_masks(&dir.join(&name))?;
    if masks.dims() != image.dims() {
        return Err(Error::Data(format!("{name}: mask size {:?} differs from image", masks.dims())));
    }
    let skin = synth::render(&params, size)?.skin;
    Ok(Sample { id, view, params, image, masks, skin })
}

/// Reads `<prefix>_eyes.pgm`, `<prefix>_nose.pgm` and `<prefix>_mouth.pgm`.
pub fn read_part_masks(prefix: &Path) -> Result<PartMaskSet> {
    let read = |part: Part| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(format!("_{part}.pgm"));
        read_mask(&PathBuf::from(p))
    };
    PartMaskSet::new(read(Part::Eyes)?, read(Part::Nose)?, read(Part::Mouth)?)
        .map_err(|e| Error::Data(format!("{}: {e}", prefix.display())))
}

pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Data(format!("line {}: expected `key = value`", n + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Data(format!("line {}: duplicate key {}", n + 1, k.trim())));
        }
    }
    Ok(map)
}

/// A target view and one source view per swappable part (eyes, nose, mouth),
/// all from distinct identities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub target: (u64, usize),
    pub sources: [(u64, usize); 3],
}

/// Draws `n` triples over identities `ids` (at least four needed).
pub fn eval_triples(ids: &[u64], views: usize, n: usize, seed: u64) -> Result<Vec<Triple>> {
    if ids.len() < 4 {
        return Err(Error::Data(format!("need at least 4 identities for triples, have {}", ids.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7419_1e5e_0000_0001);
    Ok((0..n)
        .map(|_| {
            let picked: Vec<u64> = ids.choose_multiple(&mut rng, 4).copied().collect();
            let mut v = || rng.gen_range(0..views);
            Triple { target: (picked[0], v()), sources: [(picked[1], v()), (picked[2], v()), (picked[3], v())] }
        })
        .collect())
}
