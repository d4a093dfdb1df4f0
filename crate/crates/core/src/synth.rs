//! Sampler for the scoped generative process.
//!
//! Each locale draws its own local parameters `phi` (one Dirichlet draw per
//! class), then each instance draws a label from `eta`, a global bag from
//! `beta[label]` and a local bag from `phi[label]`.

use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dims, Instance, Locale, Names};
use crate::error::{Error, Result};
use crate::global_model::GenerativeGlobalModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstancesPerLocale {
    Fixed(usize),
    /// Inclusive range, sampled uniformly per locale.
    Range([usize; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaKeyword {
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaTruth {
    Given(Vec<f64>),
    /// Drawn from a uniform Dirichlet.
    Keyword(EtaKeyword),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "F")]
    pub f: usize,
    pub locale_count: usize,
    /// Extra labeled locales sampled from the same `eta` and `beta`.
    #[serde(default)]
    pub train_locale_count: usize,
    pub instances_per_locale: InstancesPerLocale,
    pub eta_truth: EtaTruth,
    pub beta_concentration: f64,
    pub phi_concentration: f64,
    pub global_bag_size: usize,
    pub local_bag_size: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.k == 0 || self.v == 0 || self.f == 0 {
            return bad("K, V and F must be at least 1");
        }
        if self.locale_count == 0 {
            return bad("locale_count must be at least 1");
        }
        match self.instances_per_locale {
            InstancesPerLocale::Fixed(0) => return bad("instances_per_locale must be at least 1"),
            InstancesPerLocale::Range([lo, hi]) if lo == 0 || lo > hi => {
                return bad("instances_per_locale range must satisfy 1 <= min <= max")
            }
            _ => {}
        }
        for (name, c) in [("beta_concentration", self.beta_concentration), ("phi_concentration", self.phi_concentration)] {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive and finite")));
            }
        }
        if self.global_bag_size == 0 || self.local_bag_size == 0 {
            return bad("bag sizes must be at least 1");
        }
        if let EtaTruth::Given(eta) = &self.eta_truth {
            if eta.len() != self.k {
                return Err(Error::DimensionMismatch(format!("eta_truth has {} entries, K={}", eta.len(), self.k)));
            }
            let s: f64 = eta.iter().sum();
            if eta.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return bad("eta_truth must lie on the simplex");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocaleTruth {
    pub id: String,
    pub phi: Vec<Vec<f64>>,
}

/// Ground-truth parameters behind a sampled corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "F")]
    pub f: usize,
    pub eta: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub locales: Vec<LocaleTruth>,
}

impl Truth {
    /// The true global model, with no smoothing recorded.
    pub fn global_model(&self) -> Result<GenerativeGlobalModel> {
        GenerativeGlobalModel::new(self.eta.clone(), self.beta.clone(), 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Labeled locales for training a global model; `None` when the spec asks
    /// for none.
    pub train: Option<Corpus>,
    pub test: Corpus,
    pub truth: Truth,
}

/// splitmix64 finalizer, used to derive independent per-locale seeds.
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One draw from a symmetric Dirichlet via normalized gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, dim: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated positive");
    loop {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        if s > 0.0 && s.is_finite() {
            return draws.into_iter().map(|x| x / s).collect();
        }
    }
}

fn categorical(p: &[f64]) -> WeightedIndex<f64> {
    WeightedIndex::new(p).expect("simplex rows have positive mass")
}

fn sample_locale(
    spec: &SynthSpec,
    id: String,
    index: u64,
    eta: &WeightedIndex<f64>,
    beta: &[WeightedIndex<f64>],
) -> (Locale, LocaleTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index));
    let phi: Vec<Vec<f64>> = (0..spec.k).map(|_| sample_dirichlet(&mut rng, spec.f, spec.phi_concentration)).collect();
    let phi_dist: Vec<_> = phi.iter().map(|row| categorical(row)).collect();
    let n = match spec.instances_per_locale {
        InstancesPerLocale::Fixed(n) => n,
        InstancesPerLocale::Range([lo, hi]) => rng.random_range(lo..=hi),
    };
    let instances = (0..n)
        .map(|_| {
            let c = eta.sample(&mut rng);
            let g = (0..spec.global_bag_size).map(|_| beta[c].sample(&mut rng)).collect();
            let l = (0..spec.local_bag_size).map(|_| phi_dist[c].sample(&mut rng)).collect();
            Instance::new(g, l, Some(c))
        })
        .collect();
    (Locale::new(id.clone(), instances), LocaleTruth { id, phi })
}

/// Samples a labeled corpus and its ground truth. Fully determined by the
/// spec, including the seed; every locale has its own derived seed.
pub fn sample_corpus(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0));
    let eta = match &spec.eta_truth {
        EtaTruth::Given(e) => e.clone(),
        EtaTruth::Keyword(EtaKeyword::Sample) => sample_dirichlet(&mut rng, spec.k, 1.0),
    };
    let beta: Vec<Vec<f64>> = (0..spec.k).map(|_| sample_dirichlet(&mut rng, spec.v, spec.beta_concentration)).collect();
    let eta_dist = categorical(&eta);
    let beta_dist: Vec<_> = beta.iter().map(|row| categorical(row)).collect();

    let dims = Dims::new(spec.k, spec.v, spec.f);
    let mut truths = Vec::with_capacity(spec.train_locale_count + spec.locale_count);
    let mut build = |prefix: &str, count: usize, offset: usize| -> Result<Corpus> {
        let width = count.to_string().len().max(4);
        let locales = (0..count)
            .map(|i| {
                let id = format!("{prefix}-{i:0width$}");
                let (loc, t) = sample_locale(spec, id, (offset + i + 1) as u64, &eta_dist, &beta_dist);
                truths.push(t);
                loc
            })
            .collect();
        Corpus::new(locales, dims, Names::default())
    };
    let train = if spec.train_locale_count > 0 {
        Some(build("train", spec.train_locale_count, 0)?)
    } else {
        None
    };
    let test = build("test", spec.locale_count, spec.train_locale_count)?;
    Ok(SynthOutput {
        train,
        test,
        truth: Truth {
            k: spec.k,
            v: spec.v,
            f: spec.f,
            eta,
            beta,
            locales: truths,
        },
    })
}

pub fn write_truth<W: Write>(truth: &Truth, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, truth)?;
    writeln!(w)?;
    Ok(())
}

pub fn save_truth(truth: &Truth, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_truth(truth, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<SynthSpec> {
    SynthSpec::from_json(&std::fs::read_to_string(path)?)
}
