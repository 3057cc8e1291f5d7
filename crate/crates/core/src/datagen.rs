//! Minimal-perturbation dataset generation.
//!
//! For each correctly classified image and a random incorrect target class,
//! a bisection over ε finds (within a confidence width η) the smallest
//! radius at which a budgeted PGD run still succeeds. Records replay: the
//! succeeding probe's seed and budget are stored, so rerunning PGD at the
//! recorded ε reproduces the success deterministically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackProperty, PerturbationBall, PgdConfig};
use crate::error::{Error, Result};
use crate::netcore::Network;

/// Generation parameters recorded with every property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Bisection confidence width η.
    pub eta: f64,
    /// PGD restarts per probe.
    pub restarts: usize,
    /// PGD steps per restart.
    pub pgd_steps: usize,
    /// PGD step size.
    pub pgd_lr: f64,
    /// Seed of the succeeding probe at the recorded ε.
    pub seed: u64,
    /// Total shift applied by the easy variant, when any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub easy_shift: Option<f64>,
}

/// One generated attack property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyRecord {
    pub image: Vec<f64>,
    pub y: usize,
    pub y_tar: usize,
    pub epsilon: f64,
    pub provenance: Provenance,
}

impl PropertyRecord {
    pub fn property(&self, net: &Network) -> Result<AttackProperty> {
        let ball = PerturbationBall::around(net, self.image.clone(), self.epsilon)?;
        AttackProperty::new(ball, self.y, self.y_tar)
    }

    /// Re-run PGD with the recorded budget and seed at the recorded ε.
    pub fn replay(&self, net: &Network) -> Result<bool> {
        let prop = self.property(net)?;
        let cfg = PgdConfig {
            steps: self.provenance.pgd_steps,
            alpha: self.provenance.pgd_lr,
            seed: self.provenance.seed,
            max_restarts: Some(self.provenance.restarts),
            ..PgdConfig::default()
        };
        Ok(pgd_attack(net, &prop, &cfg)?.success)
    }
}

/// Bisection configuration. `eps_hi = None` uses the largest ℓ∞ radius that
/// still adds feasible points (the farthest box corner from the center).
#[derive(Debug, Clone)]
pub struct BisectConfig {
    pub eta: f64,
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    pub eps_lo: f64,
    pub eps_hi: Option<f64>,
    pub seed: u64,
}

impl Default for BisectConfig {
    fn default() -> Self {
        BisectConfig {
            eta: 1e-3,
            restarts: 20_000,
            steps: 2_000,
            lr: 1e-2,
            eps_lo: 0.0,
            eps_hi: None,
            seed: 0,
        }
    }
}

/// Desk-scale budget for tests and demos.
impl BisectConfig {
    pub fn desk(seed: u64) -> Self {
        BisectConfig {
            restarts: 10,
            steps: 200,
            seed,
            ..BisectConfig::default()
        }
    }
}

fn default_eps_hi(net: &Network, x: &[f64]) -> f64 {
    net.input_box()
        .iter()
        .zip(x)
        .map(|(&(lo, hi), &c)| (c - lo).max(hi - c))
        .fold(0.0, f64::max)
}

/// Result of one bisection, including the succeeding probe's seed for
/// replay.
#[derive(Debug, Clone)]
struct Bisection {
    epsilon: f64,
    probe_seed: u64,
}

fn probe(net: &Network, x: &[f64], y: usize, y_tar: usize, eps: f64, cfg: &BisectConfig, probe_seed: u64) -> Result<bool> {
    let ball = PerturbationBall::around(net, x.to_vec(), eps)?;
    let prop = AttackProperty::new(ball, y, y_tar)?;
    let pgd = PgdConfig {
        steps: cfg.steps,
        alpha: cfg.lr,
        seed: probe_seed,
        max_restarts: Some(cfg.restarts),
        ..PgdConfig::default()
    };
    Ok(pgd_attack(net, &prop, &pgd)?.success)
}

fn bisect(net: &Network, x: &[f64], y: usize, y_tar: usize, cfg: &BisectConfig) -> Result<Bisection> {
    if cfg.eta <= 0.0 {
        return Err(Error::config(format!("eta {} must be positive", cfg.eta)));
    }
    if net.classify(x)? != y {
        return Err(Error::InvalidProperty(
            "network misclassifies the image".into(),
        ));
    }
    // Degenerate bracket: the target class already matches or beats the true
    // class, so the property is trivial at eps_lo.
    if net.adversarial_loss(x, y, y_tar)? >= 0.0 {
        return Ok(Bisection {
            epsilon: cfg.eps_lo,
            probe_seed: cfg.seed,
        });
    }
    let mut lo = cfg.eps_lo;
    let mut hi = cfg.eps_hi.unwrap_or_else(|| default_eps_hi(net, x));
    if hi <= lo {
        return Err(Error::BracketTooSmall(hi));
    }
    let mut probe_idx: u64 = 0;
    let derive = |idx: &mut u64| -> u64 {
        let s = crate::training::start_seed(cfg.seed, *idx as usize, 0, 0xB15EC7);
        *idx += 1;
        s
    };
    let seed_hi = derive(&mut probe_idx);
    if !probe(net, x, y, y_tar, hi, cfg, seed_hi)? {
        return Err(Error::BracketTooSmall(hi));
    }
    let mut hi_seed = seed_hi;
    while hi - lo > cfg.eta {
        let mid = 0.5 * (lo + hi);
        let seed_mid = derive(&mut probe_idx);
        if probe(net, x, y, y_tar, mid, cfg, seed_mid)? {
            hi = mid;
            hi_seed = seed_mid;
        } else {
            lo = mid;
        }
    }
    Ok(Bisection {
        epsilon: hi,
        probe_seed: hi_seed,
    })
}

/// Smallest ε (within η) at which the budgeted PGD oracle succeeds,
/// maintaining the bracket invariant (success at `hi`, no observed success
/// at `lo`). Returns `eps_lo` for trivial properties whose target class
/// already wins at the image itself.
pub fn binary_search_epsilon(
    net: &Network,
    x: &[f64],
    y: usize,
    y_tar: usize,
    cfg: &BisectConfig,
) -> Result<f64> {
    Ok(bisect(net, x, y, y_tar, cfg)?.epsilon)
}

/// A labeled input for dataset generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageSample {
    pub image: Vec<f64>,
    pub label: usize,
}

/// Build `count` property records: walk the image source in order, skip
/// misclassified, trivial, and unattackable images, pick the target class
/// uniformly among the incorrect ones, and bisect the minimal ε.
/// Deterministic under `seed`.
pub fn generate_dataset(
    net: &Network,
    images: &[ImageSample],
    count: usize,
    cfg: &BisectConfig,
    seed: u64,
) -> Result<Vec<PropertyRecord>> {
    let m = net.output_dim();
    if m < 2 {
        return Err(Error::config("dataset generation needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    for (idx, sample) in images.iter().enumerate() {
        if records.len() == count {
            break;
        }
        if net.classify(&sample.image)? != sample.label {
            continue;
        }
        let offset = rng.random_range(1..m);
        let y_tar = (sample.label + offset) % m;
        let per_image = BisectConfig {
            seed: crate::training::start_seed(seed, idx, y_tar, 0xDA7A),
            ..cfg.clone()
        };
        match bisect(net, &sample.image, sample.label, y_tar, &per_image) {
            Ok(b) if b.epsilon > per_image.eps_lo => records.push(PropertyRecord {
                image: sample.image.clone(),
                y: sample.label,
                y_tar,
                epsilon: b.epsilon,
                provenance: Provenance {
                    eta: per_image.eta,
                    restarts: per_image.restarts,
                    pgd_steps: per_image.steps,
                    pgd_lr: per_image.lr,
                    seed: b.probe_seed,
                    easy_shift: None,
                },
            }),
            Ok(_) => continue,                          // trivial property
            Err(Error::BracketTooSmall(_)) => continue, // not attackable in budget
            Err(e) => return Err(e),
        }
    }
    if records.len() < count {
        return Err(Error::SourceExhausted {
            needed: count,
            produced: records.len(),
        });
    }
    Ok(records)
}

/// The easy variant: every ε grows by `delta`; provenance records the total
/// shift.
pub fn easy_variant(dataset: &[PropertyRecord], delta: f64) -> Vec<PropertyRecord> {
    dataset
        .iter()
        .map(|r| {
            let mut out = r.clone();
            out.epsilon += delta;
            if delta != 0.0 {
                out.provenance.easy_shift =
                    Some(r.provenance.easy_shift.unwrap_or(0.0) + delta);
            }
            out
        })
        .collect()
}

/// Read a JSON-lines dataset.
pub fn read_dataset(path: impl AsRef<std::path::Path>) -> Result<Vec<PropertyRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::file(path.display().to_string(), e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| {
                Error::file(format!("{}:{}", path.display(), i + 1), e.to_string())
            })
        })
        .collect()
}

/// Write a JSON-lines dataset.
pub fn write_dataset(path: impl AsRef<std::path::Path>, records: &[PropertyRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Read JSON-lines image samples.
pub fn read_images(path: impl AsRef<std::path::Path>) -> Result<Vec<ImageSample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::file(path.display().to_string(), e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| {
                Error::file(format!("{}:{}", path.display(), i + 1), e.to_string())
            })
        })
        .collect()
}
