//! Synthetic multimodal, multi-domain data.
//!
//! Live samples of a domain are isotropic Gaussians around a per-modality
//! offset; spoof samples are a Gaussian mixture whose components sit on
//! attack-specific directions, so the centered spoof second moment has a
//! spiked structure: an isotropic noise floor plus a low-rank term
//! `sum_k pi_k mu_k mu_k^T`. Domains differ by per-modality orthogonal
//! transforms, offsets, noise floors, and attack subsets. One attack
//! component is reserved for the benchmark's target domain so the target
//! always carries an unseen attack.

use crate::error::{Error, Result};
use crate::numerics::TokenMap;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One spoof mixture component: a prior and a per-modality direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackComponent {
    pub prior: f64,
    /// Per-modality direction vectors (concatenation is the full-space spike).
    pub directions: Vec<Vec<f64>>,
}

impl AttackComponent {
    /// Norm of the concatenated direction.
    pub fn norm(&self) -> f64 {
        self.directions
            .iter()
            .flat_map(|d| d.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Generative description of one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    /// Per-modality orthogonal transform, row-major `dim x dim`.
    pub transforms: Vec<Vec<f64>>,
    /// Per-modality offset.
    pub offsets: Vec<Vec<f64>>,
    /// Live-class standard deviation (sigma_0).
    pub live_sigma: f64,
    /// Per-modality spoof noise floor (sigma_eff_m >= sigma_0).
    pub spoof_sigmas: Vec<f64>,
    pub attacks: Vec<AttackComponent>,
    /// Modality availability in this domain.
    pub availability: Vec<bool>,
}

impl DomainSpec {
    pub fn modalities(&self) -> usize {
        self.transforms.len()
    }

    pub fn dim(&self) -> usize {
        self.offsets[0].len()
    }

    /// Check structural invariants: orthogonal transforms, positive noise
    /// floors at or above the live sigma, priors summing to one, and
    /// nonzero attack directions.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for q in &self.transforms {
            if q.len() != d * d {
                return Err(Error::Config("transform dimension mismatch".into()));
            }
            // Q^T Q = I within 1e-10
            for i in 0..d {
                for j in 0..d {
                    let mut dot = 0.0;
                    for r in 0..d {
                        dot += q[r * d + i] * q[r * d + j];
                    }
                    let expect = if i == j { 1.0 } else { 0.0 };
                    if (dot - expect).abs() > 1e-10 {
                        return Err(Error::Config(format!(
                            "transform not orthogonal at ({i},{j}): {dot}"
                        )));
                    }
                }
            }
        }
        if self.live_sigma <= 0.0 {
            return Err(Error::Config("live sigma must be positive".into()));
        }
        for &s in &self.spoof_sigmas {
            if s * s < self.live_sigma * self.live_sigma {
                return Err(Error::Config(
                    "spoof noise floor below live variance".into(),
                ));
            }
        }
        if !self.attacks.is_empty() {
            let total: f64 = self.attacks.iter().map(|a| a.prior).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("attack priors sum to {total}")));
            }
            for a in &self.attacks {
                if a.norm() <= 0.0 {
                    return Err(Error::Config("attack direction has zero norm".into()));
                }
            }
        }
        Ok(())
    }
}

/// One generated sample: per-modality raw vectors plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub inputs: Vec<Vec<f64>>,
    /// 0 = live, 1 = spoof.
    pub label: u8,
    pub domain: usize,
    /// Mixture component index, -1 for live.
    pub attack: i32,
    pub availability: Vec<bool>,
}

impl SyntheticSample {
    /// Concatenated input across modalities (missing ones are zeroed).
    pub fn concat_input(&self) -> Vec<f64> {
        self.inputs.iter().flat_map(|m| m.iter().copied()).collect()
    }
}

/// How domains differ from each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftFamily {
    /// Per-domain orthogonal transform plus offset (norm-preserving).
    RotateOffset,
    /// Identity transforms; domains differ through noise-floor scaling.
    VarianceScale,
}

/// Benchmark-level generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub n_domains: usize,
    pub per_domain: usize,
    pub modalities: usize,
    pub dim: usize,
    /// Size of the global attack dictionary; the last component is reserved
    /// for the target domain.
    pub n_attacks: usize,
    pub live_sigma: f64,
    /// Additional per-modality noise on spoofs, scaled by modality index.
    pub spoof_sigma_spread: f64,
    /// Norm budget of each attack's concatenated direction.
    pub attack_norm: f64,
    /// Norm of the per-modality domain offsets.
    pub offset_scale: f64,
    pub shift: ShiftFamily,
    /// Domain that owns the reserved (unseen) attack.
    pub reserved_target: usize,
    /// Modality carrying the reserved attack's energy; `None` spreads it
    /// like the source attacks.
    pub unseen_attack_modality: Option<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_domains: 4,
            per_domain: 2000,
            modalities: 3,
            dim: 16,
            n_attacks: 4,
            live_sigma: 0.3,
            spoof_sigma_spread: 0.05,
            attack_norm: 1.5,
            offset_scale: 0.5,
            shift: ShiftFamily::RotateOffset,
            reserved_target: 3,
            unseen_attack_modality: Some(0),
        }
    }
}

/// All domains of one generated benchmark.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: BenchmarkConfig,
    pub domains: Vec<DomainData>,
}

#[derive(Debug, Clone)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub samples: Vec<SyntheticSample>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Haar-ish random orthogonal matrix via QR of a Gaussian matrix.
fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix signs so the distribution doesn't collapse on the QR convention
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = q[(i, j)];
        }
    }
    out
}

fn matvec(q: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d {
        let row = &q[i * d..(i + 1) * d];
        out[i] = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    }
    out
}

/// Draw a live sample: per modality `x_m = Q_m (sigma_0 xi) + b_m`.
pub fn sample_live(spec: &DomainSpec, rng: &mut impl Rng) -> SyntheticSample {
    let d = spec.dim();
    let inputs = (0..spec.modalities())
        .map(|m| {
            let noise: Vec<f64> = gaussian_vec(rng, d)
                .into_iter()
                .map(|x| spec.live_sigma * x)
                .collect();
            let mut v = matvec(&spec.transforms[m], &noise, d);
            for (vi, b) in v.iter_mut().zip(spec.offsets[m].iter()) {
                *vi += b;
            }
            v
        })
        .collect();
    SyntheticSample {
        inputs,
        label: 0,
        domain: spec.id,
        attack: -1,
        availability: spec.availability.clone(),
    }
}

/// Draw a spoof sample: pick an attack by prior, then per modality
/// `x_m = Q_m (mu_{k,m} + sigma_eff_m xi) + b_m`.
pub fn sample_spoof(spec: &DomainSpec, rng: &mut impl Rng) -> Result<SyntheticSample> {
    if spec.attacks.is_empty() {
        return Err(Error::Config("domain has an empty attack set".into()));
    }
    let d = spec.dim();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut k = spec.attacks.len() - 1;
    for (i, a) in spec.attacks.iter().enumerate() {
        acc += a.prior;
        if u < acc {
            k = i;
            break;
        }
    }
    let attack = &spec.attacks[k];
    let inputs = (0..spec.modalities())
        .map(|m| {
            let sig = spec.spoof_sigmas[m];
            let mut core: Vec<f64> = gaussian_vec(rng, d)
                .into_iter()
                .map(|x| sig * x)
                .collect();
            for (c, mu) in core.iter_mut().zip(attack.directions[m].iter()) {
                *c += mu;
            }
            let mut v = matvec(&spec.transforms[m], &core, d);
            for (vi, b) in v.iter_mut().zip(spec.offsets[m].iter()) {
                *vi += b;
            }
            v
        })
        .collect();
    Ok(SyntheticSample {
        inputs,
        label: 1,
        domain: spec.id,
        attack: k as i32,
        availability: spec.availability.clone(),
    })
}

/// Assign each domain its attack subset. Sources draw from the first
/// `n_attacks - 1` components; the reserved last component goes to the
/// target domain only.
fn attack_subset(cfg: &BenchmarkConfig, domain: usize) -> Vec<usize> {
    let shared = cfg.n_attacks - 1;
    if domain == cfg.reserved_target {
        // unseen component plus one shared, so the target is not 100% novel
        vec![cfg.n_attacks - 1, 0]
    } else {
        let a = domain % shared;
        let b = (domain + 1) % shared;
        if a == b {
            vec![a]
        } else {
            vec![a, b]
        }
    }
}

/// Build the full deterministic benchmark: `n_domains` domains that differ
/// in transform, offset, noise floor, and attack composition, each with a
/// class-balanced sample set.
pub fn build_benchmark(cfg: &BenchmarkConfig) -> Result<Dataset> {
    if cfg.n_domains < 3 {
        return Err(Error::Config("need at least 3 domains".into()));
    }
    if cfg.n_attacks < 2 {
        return Err(Error::Config(
            "need at least 2 attacks to reserve one for the target".into(),
        ));
    }
    if cfg.reserved_target >= cfg.n_domains {
        return Err(Error::Config("reserved target out of range".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let (m, d) = (cfg.modalities, cfg.dim);

    // global attack dictionary
    let per_modality_norm = cfg.attack_norm / (m as f64).sqrt();
    let mut attacks_dict: Vec<Vec<Vec<f64>>> = Vec::new();
    for k in 0..cfg.n_attacks {
        let concentrated = k == cfg.n_attacks - 1;
        let dirs: Vec<Vec<f64>> = (0..m)
            .map(|mi| {
                let raw = gaussian_vec(&mut rng, d);
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = match (concentrated, cfg.unseen_attack_modality) {
                    (true, Some(only)) => {
                        if mi == only {
                            cfg.attack_norm / norm
                        } else {
                            0.0
                        }
                    }
                    _ => per_modality_norm / norm,
                };
                raw.into_iter().map(|v| v * scale).collect()
            })
            .collect();
        attacks_dict.push(dirs);
    }

    let mut domains = Vec::with_capacity(cfg.n_domains);
    for e in 0..cfg.n_domains {
        let (transforms, offsets, sigma_scale): (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) =
            match cfg.shift {
                ShiftFamily::RotateOffset => {
                    let ts = (0..m).map(|_| random_orthogonal(&mut rng, d)).collect();
                    let os = (0..m)
                        .map(|_| {
                            let raw = gaussian_vec(&mut rng, d);
                            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                            raw.into_iter()
                                .map(|v| v * cfg.offset_scale / norm)
                                .collect()
                        })
                        .collect();
                    (ts, os, 1.0)
                }
                ShiftFamily::VarianceScale => {
                    let mut identity = vec![0.0; d * d];
                    for i in 0..d {
                        identity[i * d + i] = 1.0;
                    }
                    (
                        vec![identity; m],
                        vec![vec![0.0; d]; m],
                        1.0 + 0.15 * e as f64,
                    )
                }
            };
        let subset = attack_subset(cfg, e);
        let prior = 1.0 / subset.len() as f64;
        let attacks = subset
            .iter()
            .map(|&k| AttackComponent {
                prior,
                directions: attacks_dict[k].clone(),
            })
            .collect();
        let spoof_sigmas = (0..m)
            .map(|mi| (cfg.live_sigma + cfg.spoof_sigma_spread * (mi + 1) as f64) * sigma_scale)
            .collect();
        let spec = DomainSpec {
            id: e,
            transforms,
            offsets,
            live_sigma: cfg.live_sigma * sigma_scale,
            spoof_sigmas,
            attacks,
            availability: vec![true; m],
        };
        spec.validate()?;
        domains.push(spec);
    }

    let domains = domains
        .into_iter()
        .map(|spec| {
            let half = cfg.per_domain / 2;
            let mut samples = Vec::with_capacity(cfg.per_domain);
            for _ in 0..half {
                samples.push(sample_live(&spec, &mut rng));
            }
            for _ in 0..cfg.per_domain - half {
                samples.push(sample_spoof(&spec, &mut rng)?);
            }
            Ok(DomainData { spec, samples })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        config: cfg.clone(),
        domains,
    })
}

/// Evaluation protocol: which domains train, which evaluate, and how
/// modalities go missing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Protocol {
    pub name: String,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    /// Probability that each listed modality is dropped per training sample.
    pub train_drop_prob: f64,
    /// Modalities subject to train-time dropping.
    pub train_drop_modalities: Vec<usize>,
    /// Modalities zeroed at evaluation time.
    pub test_missing: Vec<usize>,
}

impl Protocol {
    /// Leave-one-out with complete modalities.
    pub fn complete(n_domains: usize, target: usize) -> Self {
        Self {
            name: format!("complete->d{target}"),
            sources: (0..n_domains).filter(|&e| e != target).collect(),
            targets: vec![target],
            train_drop_prob: 0.0,
            train_drop_modalities: Vec::new(),
            test_missing: Vec::new(),
        }
    }

    /// Leave-one-out with modalities missing at evaluation time.
    pub fn missing_test(n_domains: usize, target: usize, missing: Vec<usize>) -> Self {
        let tag: Vec<String> = missing.iter().map(|m| format!("m{m}")).collect();
        Self {
            name: format!("missing-test[{}]->d{target}", tag.join(",")),
            sources: (0..n_domains).filter(|&e| e != target).collect(),
            targets: vec![target],
            train_drop_prob: 0.0,
            train_drop_modalities: Vec::new(),
            test_missing: missing,
        }
    }

    /// Leave-one-out with random train-time modality dropping.
    pub fn missing_train(n_domains: usize, target: usize, drop: Vec<usize>, prob: f64) -> Self {
        Self {
            name: format!("missing-train(p={prob})->d{target}"),
            sources: (0..n_domains).filter(|&e| e != target).collect(),
            targets: vec![target],
            train_drop_prob: prob,
            train_drop_modalities: drop,
            test_missing: Vec::new(),
        }
    }

    /// Restricted source set.
    pub fn limited(sources: Vec<usize>, targets: Vec<usize>) -> Self {
        Self {
            name: format!("limited{sources:?}->{targets:?}"),
            sources,
            targets,
            train_drop_prob: 0.0,
            train_drop_modalities: Vec::new(),
            test_missing: Vec::new(),
        }
    }

    pub fn validate(&self, n_domains: usize) -> Result<()> {
        if self.sources.iter().any(|s| self.targets.contains(s)) {
            return Err(Error::Config("protocol source/target overlap".into()));
        }
        if self
            .sources
            .iter()
            .chain(self.targets.iter())
            .any(|&e| e >= n_domains)
        {
            return Err(Error::Config("protocol references unknown domain".into()));
        }
        if self.sources.is_empty() || self.targets.is_empty() {
            return Err(Error::Config("protocol needs sources and targets".into()));
        }
        Ok(())
    }
}

fn mask_sample(s: &mut SyntheticSample, modality: usize) {
    for v in s.inputs[modality].iter_mut() {
        *v = 0.0;
    }
    s.availability[modality] = false;
}

/// Materialize a protocol: training stream from the sources (with random
/// train-time drops) and evaluation stream from the targets (with fixed
/// test-time masking). Missing modalities are zeroed, with the availability
/// mask recording absence.
pub fn apply_protocol(
    dataset: &Dataset,
    protocol: &Protocol,
    rng: &mut impl Rng,
) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    protocol.validate(dataset.domains.len())?;
    let mut train = Vec::new();
    for &e in &protocol.sources {
        for s in &dataset.domains[e].samples {
            let mut s = s.clone();
            for &m in &protocol.train_drop_modalities {
                if rng.gen::<f64>() < protocol.train_drop_prob {
                    mask_sample(&mut s, m);
                }
            }
            train.push(s);
        }
    }
    let mut eval = Vec::new();
    for &e in &protocol.targets {
        for s in &dataset.domains[e].samples {
            let mut s = s.clone();
            for &m in &protocol.test_missing {
                mask_sample(&mut s, m);
            }
            eval.push(s);
        }
    }
    Ok((train, eval))
}

/// Lift a raw `d`-vector to an `h x w` token map with `d` channels.
///
/// Channel `c` of token `(r, q)` is `x[c] * basis_c(r, q)` where the basis
/// mixes a DC offset with a low-frequency plane wave, so spectra are
/// non-trivial but smooth.
pub fn lift_to_tokens(x: &[f64], h: usize, w: usize) -> TokenMap {
    let d = x.len();
    let mut data = vec![0.0; h * w * d];
    for r in 0..h {
        for q in 0..w {
            let p = r * w + q;
            for c in 0..d {
                let fr = (c % 3 + 1) as f64;
                let fc = (c / 3 % 3 + 1) as f64;
                let phase = 0.7 * c as f64;
                let basis = 1.0
                    + 0.5
                        * (2.0 * std::f64::consts::PI
                            * (fr * r as f64 / h as f64 + fc * q as f64 / w as f64)
                            + phase)
                            .cos();
                data[p * d + c] = x[c] * basis;
            }
        }
    }
    TokenMap::new(h, w, d, data).expect("lift dimensions consistent")
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    config: BenchmarkConfig,
    specs: Vec<DomainSpec>,
}

/// Write the dataset as a JSON header line followed by one numeric text
/// line per sample: `domain label attack <avail bits> <inputs...>`.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        format: "radfas-dataset".into(),
        version: 1,
        config: dataset.config.clone(),
        specs: dataset.domains.iter().map(|d| d.spec.clone()).collect(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for dom in &dataset.domains {
        for s in &dom.samples {
            let avail: String = s
                .availability
                .iter()
                .map(|&a| if a { '1' } else { '0' })
                .collect();
            write!(out, "{} {} {} {}", s.domain, s.label, s.attack, avail)?;
            for m in &s.inputs {
                for v in m {
                    write!(out, " {v:.17e}")?;
                }
            }
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: DatasetHeader = serde_json::from_str(header_line.trim_end())?;
    if header.format != "radfas-dataset" {
        return Err(Error::Config(format!(
            "unexpected dataset format '{}'",
            header.format
        )));
    }
    let (m, d) = (header.config.modalities, header.config.dim);
    let mut domains: Vec<DomainData> = header
        .specs
        .iter()
        .map(|spec| DomainData {
            spec: spec.clone(),
            samples: Vec::new(),
        })
        .collect();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_ascii_whitespace();
        let mut next = || -> Result<&str> {
            it.next()
                .ok_or_else(|| Error::Config("truncated sample line".into()))
        };
        let domain: usize = next()?
            .parse()
            .map_err(|e| Error::Config(format!("bad domain id: {e}")))?;
        let label: u8 = next()?
            .parse()
            .map_err(|e| Error::Config(format!("bad label: {e}")))?;
        let attack: i32 = next()?
            .parse()
            .map_err(|e| Error::Config(format!("bad attack: {e}")))?;
        let avail_str = next()?;
        let availability: Vec<bool> = avail_str.chars().map(|c| c == '1').collect();
        if availability.len() != m {
            return Err(Error::Config("availability mask length mismatch".into()));
        }
        let mut inputs = Vec::with_capacity(m);
        for _ in 0..m {
            let mut v = Vec::with_capacity(d);
            for _ in 0..d {
                let x: f64 = next()?
                    .parse()
                    .map_err(|e| Error::Config(format!("bad value: {e}")))?;
                v.push(x);
            }
            inputs.push(v);
        }
        if domain >= domains.len() {
            return Err(Error::Config("sample references unknown domain".into()));
        }
        domains[domain].samples.push(SyntheticSample {
            inputs,
            label,
            domain,
            attack,
            availability,
        });
    }
    Ok(Dataset {
        config: header.config,
        domains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn plain_spec(
        d: usize,
        live_sigma: f64,
        spoof_sigma: f64,
        attacks: Vec<AttackComponent>,
    ) -> DomainSpec {
        let mut identity = vec![0.0; d * d];
        for i in 0..d {
            identity[i * d + i] = 1.0;
        }
        DomainSpec {
            id: 0,
            transforms: vec![identity],
            offsets: vec![vec![0.0; d]],
            live_sigma,
            spoof_sigmas: vec![spoof_sigma],
            attacks,
            availability: vec![true],
        }
    }

    #[test]
    fn degenerate_live_equals_offset() {
        let mut spec = plain_spec(4, 1e-12, 1e-12, Vec::new());
        spec.offsets[0] = vec![1.0, -2.0, 0.5, 3.0];
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let s = sample_live(&spec, &mut rng);
        for (a, b) in s.inputs[0].iter().zip(spec.offsets[0].iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(s.label, 0);
        assert_eq!(s.attack, -1);
    }

    #[test]
    fn degenerate_spoof_single_component() {
        let d = 4;
        let attack = AttackComponent {
            prior: 1.0,
            directions: vec![vec![2.0, 0.0, 0.0, 0.0]],
        };
        let spec = plain_spec(d, 1e-12, 1e-12, vec![attack]);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let s = sample_spoof(&spec, &mut rng).unwrap();
        assert!((s.inputs[0][0] - 2.0).abs() < 1e-10);
        for v in &s.inputs[0][1..] {
            assert!(v.abs() < 1e-10);
        }
        assert_eq!(s.label, 1);
        assert_eq!(s.attack, 0);
    }

    #[test]
    fn empty_attack_set_is_config_error() {
        let spec = plain_spec(4, 0.1, 0.1, Vec::new());
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        assert!(matches!(
            sample_spoof(&spec, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn live_moments_match_monte_carlo() {
        let cfg = BenchmarkConfig {
            per_domain: 10,
            ..BenchmarkConfig::default()
        };
        let ds = build_benchmark(&cfg).unwrap();
        let spec = &ds.domains[1].spec;
        let d = spec.dim();
        let n = 100_000;
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut mean = vec![0.0; d];
        for _ in 0..n {
            let s = sample_live(spec, &mut rng);
            for (mi, xi) in mean.iter_mut().zip(s.inputs[0].iter()) {
                *mi += xi;
            }
        }
        for v in mean.iter_mut() {
            *v /= n as f64;
        }
        // empirical mean within 0.02 of the offset per coordinate
        for (mi, bi) in mean.iter().zip(spec.offsets[0].iter()) {
            assert!((mi - bi).abs() < 0.02, "mean {mi} vs offset {bi}");
        }
        let mut cov = vec![0.0; d * d];
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        for _ in 0..n {
            let s = sample_live(spec, &mut rng);
            let x = &s.inputs[0];
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (x[i] - spec.offsets[0][i]) * (x[j] - spec.offsets[0][j]);
                }
            }
        }
        let s2 = spec.live_sigma * spec.live_sigma;
        for i in 0..d {
            for j in 0..d {
                let c = cov[i * d + j] / n as f64;
                let expect = if i == j { s2 } else { 0.0 };
                assert!((c - expect).abs() < 0.02, "cov[{i},{j}]={c}");
            }
        }
    }

    #[test]
    fn spoof_second_moment_matches_spiked_form() {
        // single modality, identity transform: E[zz^T] = sigma_eff^2 I + sum pi mu mu^T
        let d = 8;
        let mu1: Vec<f64> = (0..d).map(|i| if i == 0 { 1.4 } else { 0.0 }).collect();
        let mu2: Vec<f64> = (0..d).map(|i| if i == 1 { 1.4 } else { 0.0 }).collect();
        let attacks = vec![
            AttackComponent {
                prior: 0.6,
                directions: vec![mu1.clone()],
            },
            AttackComponent {
                prior: 0.4,
                directions: vec![mu2.clone()],
            },
        ];
        let sigma_eff = 0.35;
        let spec = plain_spec(d, 0.3, sigma_eff, attacks);
        spec.validate().unwrap();
        let n = 100_000;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut second = vec![0.0; d * d];
        for _ in 0..n {
            let s = sample_spoof(&spec, &mut rng).unwrap();
            let x = &s.inputs[0];
            for i in 0..d {
                for j in 0..d {
                    second[i * d + j] += x[i] * x[j];
                }
            }
        }
        let mut expect = vec![0.0; d * d];
        for i in 0..d {
            expect[i * d + i] = sigma_eff * sigma_eff;
        }
        for (pi, mu) in [(0.6, &mu1), (0.4, &mu2)] {
            for i in 0..d {
                for j in 0..d {
                    expect[i * d + j] += pi * mu[i] * mu[j];
                }
            }
        }
        let mut err2 = 0.0;
        let mut ref2 = 0.0;
        for i in 0..d * d {
            let e = second[i] / n as f64 - expect[i];
            err2 += e * e;
            ref2 += expect[i] * expect[i];
        }
        assert!(
            err2.sqrt() / ref2.sqrt() < 0.02,
            "relative Frobenius error {}",
            err2.sqrt() / ref2.sqrt()
        );

        // top-2 eigenvalues of the empirical second moment approach
        // sigma_eff^2 + pi_k |mu_k|^2
        let emp = DMatrix::from_fn(d, d, |i, j| second[i * d + j] / n as f64);
        let mut eigs: Vec<f64> = emp.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let lam1 = sigma_eff * sigma_eff + 0.6 * 1.4 * 1.4;
        let lam2 = sigma_eff * sigma_eff + 0.4 * 1.4 * 1.4;
        assert!((eigs[0] - lam1).abs() / lam1 < 0.05, "{} vs {}", eigs[0], lam1);
        assert!((eigs[1] - lam2).abs() / lam2 < 0.05, "{} vs {}", eigs[1], lam2);
    }

    #[test]
    fn benchmark_is_deterministic_and_structured() {
        let cfg = BenchmarkConfig {
            per_domain: 40,
            ..BenchmarkConfig::default()
        };
        let a = build_benchmark(&cfg).unwrap();
        let b = build_benchmark(&cfg).unwrap();
        for (da, db) in a.domains.iter().zip(b.domains.iter()) {
            assert_eq!(da.samples, db.samples);
        }
        // distinct transforms across domains
        for i in 0..a.domains.len() {
            for j in i + 1..a.domains.len() {
                let qa = &a.domains[i].spec.transforms[0];
                let qb = &a.domains[j].spec.transforms[0];
                let dist: f64 = qa
                    .iter()
                    .zip(qb.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 0.1, "domains {i},{j} share a transform");
            }
        }
        // class balance per domain
        for dom in &a.domains {
            let lives = dom.samples.iter().filter(|s| s.label == 0).count();
            assert_eq!(lives, 20);
        }
        // the reserved attack appears in the target domain and nowhere else
        let reserved_norm = cfg.attack_norm;
        let target = &a.domains[cfg.reserved_target].spec;
        let has_reserved = |spec: &DomainSpec| {
            spec.attacks.iter().any(|at| {
                at.directions[0].iter().map(|v| v * v).sum::<f64>().sqrt() > 0.9 * reserved_norm
            })
        };
        assert!(has_reserved(target));
        for (e, dom) in a.domains.iter().enumerate() {
            if e != cfg.reserved_target {
                assert!(!has_reserved(&dom.spec), "reserved attack leaked into {e}");
            }
        }
    }

    #[test]
    fn protocol_masking_and_drop_rate() {
        let cfg = BenchmarkConfig {
            per_domain: 30,
            ..BenchmarkConfig::default()
        };
        let ds = build_benchmark(&cfg).unwrap();

        let complete = Protocol::complete(4, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let (train, eval) = apply_protocol(&ds, &complete, &mut rng).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(eval.len(), 30);
        assert!(train
            .iter()
            .chain(eval.iter())
            .all(|s| s.availability.iter().all(|&a| a)));

        let missing = Protocol::missing_test(4, 3, vec![1]);
        let (_, eval) = apply_protocol(&ds, &missing, &mut rng).unwrap();
        for s in &eval {
            assert!(!s.availability[1]);
            assert!(s.inputs[1].iter().all(|&v| v == 0.0));
        }

        // empirical drop rate within 0.02 of 0.7 over 10^4 samples
        let big = BenchmarkConfig {
            per_domain: 3400,
            ..BenchmarkConfig::default()
        };
        let ds = build_benchmark(&big).unwrap();
        let p2plus = Protocol::missing_train(4, 3, vec![1, 2], 0.7);
        let (train, _) = apply_protocol(&ds, &p2plus, &mut rng).unwrap();
        assert!(train.len() >= 10_000);
        let dropped = train.iter().filter(|s| !s.availability[1]).count();
        let rate = dropped as f64 / train.len() as f64;
        assert!((rate - 0.7).abs() < 0.02, "drop rate {rate}");
    }

    #[test]
    fn protocol_validation_errors() {
        let p = Protocol::limited(vec![0, 1], vec![1]);
        assert!(p.validate(4).is_err());
        let p = Protocol::complete(4, 3);
        assert!(p.validate(3).is_err());
    }

    #[test]
    fn dataset_round_trip_through_file() {
        let cfg = BenchmarkConfig {
            per_domain: 12,
            ..BenchmarkConfig::default()
        };
        let ds = build_benchmark(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.txt");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.config.seed, cfg.seed);
        for (a, b) in ds.domains.iter().zip(loaded.domains.iter()) {
            assert_eq!(a.samples, b.samples);
        }
        // byte-identical on re-save
        let path2 = dir.path().join("bench2.txt");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn token_lift_is_deterministic_and_shaped() {
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let tm = lift_to_tokens(&x, 8, 8);
        assert_eq!(tm.positions(), 64);
        assert_eq!(tm.channels, 16);
        let tm2 = lift_to_tokens(&x, 8, 8);
        assert_eq!(tm, tm2);
        // zero input lifts to zero map
        let z = lift_to_tokens(&vec![0.0; 16], 8, 8);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
