//! Frequency-mixing and shuffle-recovery pretext tasks.
//!
//! Token maps are split into low/high bands by a binary spectral mask,
//! bands are swapped across samples and modalities, each position then
//! draws one of four candidates (two pure, two mixed), and a random
//! permutation shuffles token order. Lightweight heads must recover, per
//! token, the source modality of each band and the original grid position.
//! All bookkeeping lives in a [`MixRecipe`] so labels can be re-derived
//! and verified.

use crate::error::{Error, Result};
use crate::model::BoundModel;
use crate::numerics::autodiff::{concat_rows, softmax_ce_rows, Tape, Var};
use crate::numerics::{fft, Tensor, TokenMap};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

/// Binary spectral mask: `V(u,v) = 1` iff the bin lies within `radius` of
/// the chosen center. `values` and its complement partition the grid.
#[derive(Debug, Clone)]
pub struct FrequencyMask {
    pub h: usize,
    pub w: usize,
    pub center: (f64, f64),
    pub radius: f64,
    values: Tensor,
}

impl FrequencyMask {
    /// Mask in centered (DC-shifted) coordinates: the center sits at
    /// `(h/2, w/2)` of the shifted spectrum, and the stored matrix is
    /// un-shifted back to raw DFT index order. With `radius = 1` only the
    /// DC bin is selected.
    pub fn centered(h: usize, w: usize, radius: f64) -> Self {
        let center = (h as f64 / 2.0, w as f64 / 2.0);
        let mut values = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                // shifted coordinates of raw bin (u, v)
                let su = ((u + h / 2) % h) as f64;
                let sv = ((v + w / 2) % w) as f64;
                let dist = ((su - center.0).powi(2) + (sv - center.1).powi(2)).sqrt();
                if dist < radius {
                    values[u * w + v] = 1.0;
                }
            }
        }
        Self {
            h,
            w,
            center,
            radius,
            values: Tensor::matrix(h, w, values).expect("mask shape"),
        }
    }

    /// Mask in raw DFT coordinates with the center at the given bin.
    pub fn uncentered(h: usize, w: usize, center: (f64, f64), radius: f64) -> Self {
        let mut values = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let dist = ((u as f64 - center.0).powi(2) + (v as f64 - center.1).powi(2)).sqrt();
                if dist < radius {
                    values[u * w + v] = 1.0;
                }
            }
        }
        Self {
            h,
            w,
            center,
            radius,
            values: Tensor::matrix(h, w, values).expect("mask shape"),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// `1 - V`.
    pub fn complement(&self) -> Tensor {
        let data = self.values.data().iter().map(|v| 1.0 - v).collect();
        Tensor::matrix(self.h, self.w, data).expect("mask shape")
    }

    /// Number of selected bins.
    pub fn selected(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Candidate identity at one position of a mixed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Candidate {
    /// Unmixed token of the first modality.
    PureA,
    /// Unmixed token of the second modality.
    PureB,
    /// Low band from A, high band from B.
    MixAB,
    /// Low band from B, high band from A.
    MixBA,
}

impl Candidate {
    fn from_index(i: usize) -> Self {
        match i {
            0 => Candidate::PureA,
            1 => Candidate::PureB,
            2 => Candidate::MixAB,
            _ => Candidate::MixBA,
        }
    }

    fn index(self) -> usize {
        match self {
            Candidate::PureA => 0,
            Candidate::PureB => 1,
            Candidate::MixAB => 2,
            Candidate::MixBA => 3,
        }
    }

    /// `(low origin, high origin)` under this choice for modalities `(a, b)`.
    pub fn origins(self, a: usize, b: usize) -> (usize, usize) {
        match self {
            Candidate::PureA => (a, a),
            Candidate::PureB => (b, b),
            Candidate::MixAB => (a, b),
            Candidate::MixBA => (b, a),
        }
    }
}

/// Complete origin bookkeeping for one mixed stream of one sample pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixRecipe {
    /// First modality of the ordered pair.
    pub modality_a: usize,
    /// Second modality.
    pub modality_b: usize,
    pub grid: (usize, usize),
    /// Per-position candidate choice, before shuffling.
    pub candidates: Vec<Candidate>,
    /// Per-position low-band source modality.
    pub low_origin: Vec<usize>,
    /// Per-position high-band source modality.
    pub high_origin: Vec<usize>,
    /// Output slot `q` holds the token originally at position `perm[q]`.
    pub perm: Vec<usize>,
}

impl MixRecipe {
    pub fn positions(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Normalized `(row, col)` coordinates of grid position `p`.
    pub fn position_coords(&self, p: usize) -> (f64, f64) {
        let (h, w) = self.grid;
        let (r, c) = (p / w, p % w);
        let norm = |i: usize, n: usize| {
            if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.5
            }
        };
        (norm(r, h), norm(c, w))
    }

    /// Check bijection and candidate/origin consistency.
    pub fn validate(&self) -> Result<()> {
        let p = self.positions();
        if self.candidates.len() != p
            || self.low_origin.len() != p
            || self.high_origin.len() != p
            || self.perm.len() != p
        {
            return Err(Error::Shape("recipe length mismatch".into()));
        }
        let mut seen = vec![false; p];
        for &q in &self.perm {
            if q >= p || seen[q] {
                return Err(Error::Contract("permutation is not a bijection".into()));
            }
            seen[q] = true;
        }
        for (i, &c) in self.candidates.iter().enumerate() {
            let (l, h) = c.origins(self.modality_a, self.modality_b);
            if self.low_origin[i] != l || self.high_origin[i] != h {
                return Err(Error::Contract(format!(
                    "origin labels inconsistent with candidate at {i}"
                )));
            }
        }
        Ok(())
    }

    /// Labels of the token found at output slot `q`:
    /// `(low origin, high origin, normalized original coords)`.
    pub fn slot_labels(&self, q: usize) -> (usize, usize, (f64, f64)) {
        let p = self.perm[q];
        (
            self.low_origin[p],
            self.high_origin[p],
            self.position_coords(p),
        )
    }
}

/// Split a token map into low/high components through a spectral mask.
/// The two parts reconstruct the input exactly up to FFT rounding; the
/// tiny imaginary residue of the inverse transform is dropped.
pub fn freq_split(map: &TokenMap, mask: &FrequencyMask) -> Result<(TokenMap, TokenMap)> {
    if map.h != mask.h || map.w != mask.w {
        return Err(Error::Shape(format!(
            "map {}x{} vs mask {}x{}",
            map.h, map.w, mask.h, mask.w
        )));
    }
    let spec = fft::fft2(&channel_planes(map))?;
    let low_spec = apply_mask(&spec, mask.values());
    let high_spec = apply_mask(&spec, &mask.complement());
    let low = planes_to_map(&fft::real_part(&fft::ifft2(&low_spec)?), map.h, map.w);
    let high = planes_to_map(&fft::real_part(&fft::ifft2(&high_spec)?), map.h, map.w);
    Ok((low, high))
}

/// Swap spectral bands across two token maps (typically different samples
/// and different modalities): the first result takes `a`'s low band and
/// `b`'s high band, the second the converse.
pub fn cross_mix(
    a: &TokenMap,
    b: &TokenMap,
    mask: &FrequencyMask,
) -> Result<(TokenMap, TokenMap)> {
    if a.h != b.h || a.w != b.w || a.channels != b.channels {
        return Err(Error::Shape("mixing maps of different shapes".into()));
    }
    let (a_low, _) = freq_split(a, mask)?;
    let (_, b_high) = freq_split(b, mask)?;
    let (b_low, _) = freq_split(b, mask)?;
    let (_, a_high) = freq_split(a, mask)?;
    let mut ab = a_low;
    for (x, y) in ab.data_mut().iter_mut().zip(b_high.data().iter()) {
        *x += y;
    }
    let mut ba = b_low;
    for (x, y) in ba.data_mut().iter_mut().zip(a_high.data().iter()) {
        *x += y;
    }
    Ok((ab, ba))
}

/// Uniformly choose one of the four candidates at every position, then
/// shuffle token order with a fresh permutation (identity when `shuffle`
/// is off). Returns the perturbed sequence and the recipe that fully
/// determines the inverse bookkeeping.
pub fn sample_and_shuffle(
    candidates: &[&TokenMap; 4],
    modalities: (usize, usize),
    shuffle: bool,
    rng: &mut impl Rng,
) -> Result<(TokenMap, MixRecipe)> {
    let base = candidates[0];
    for c in candidates.iter().skip(1) {
        if c.h != base.h || c.w != base.w || c.channels != base.channels {
            return Err(Error::Shape("candidate maps disagree on shape".into()));
        }
    }
    let p = base.positions();
    let choices: Vec<Candidate> = (0..p)
        .map(|_| Candidate::from_index(rng.gen_range(0..4usize)))
        .collect();
    let perm: Vec<usize> = if shuffle {
        let mut idx: Vec<usize> = (0..p).collect();
        // Fisher-Yates
        for i in (1..p).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    } else {
        (0..p).collect()
    };
    let (low_origin, high_origin): (Vec<usize>, Vec<usize>) = choices
        .iter()
        .map(|c| c.origins(modalities.0, modalities.1))
        .unzip();
    let recipe = MixRecipe {
        modality_a: modalities.0,
        modality_b: modalities.1,
        grid: (base.h, base.w),
        candidates: choices,
        low_origin,
        high_origin,
        perm,
    };
    recipe.validate()?;
    let c = base.channels;
    let mut data = Vec::with_capacity(p * c);
    for q in 0..p {
        let src = recipe.perm[q];
        data.extend_from_slice(candidates[recipe.candidates[src].index()].token(src));
    }
    Ok((TokenMap::new(base.h, base.w, c, data)?, recipe))
}

/// Mean cross-entropy of per-token logits against recipe-derived labels.
/// This is the loss core shared by the low- and high-band heads; the
/// oracle tests drive it with constructed logits.
pub fn band_ce_rows<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(softmax_ce_rows(logits, labels)?.mean_all())
}

/// Mean squared error between predicted and true normalized coordinates.
pub fn position_mse<'t>(pred: Var<'t>, targets: Var<'t>) -> Var<'t> {
    let diff = pred.sub(targets);
    diff.mul(diff).sum_cols().mean_all()
}

/// Which bands the decoupler is asked to identify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DisentangleTarget {
    HighOnly,
    LowOnly,
    HighAndLow,
    /// Single origin label per token (the spatial-mixing arm).
    Modality,
}

/// Spatial mixing swaps whole tokens instead of spectral bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixingKind {
    Frequency,
    Spatial,
}

/// Configuration of the pretext pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MmsdConfig {
    pub mask_radius: f64,
    /// Apply the mask on the centered (DC-shifted) spectrum.
    pub centered: bool,
    pub mixing: MixingKind,
    pub target: DisentangleTarget,
    pub shuffle: bool,
    /// Stop gradients at the encoder features (decoupler-only training).
    pub detach_encoder: bool,
}

impl Default for MmsdConfig {
    fn default() -> Self {
        Self {
            mask_radius: 1.0,
            centered: true,
            mixing: MixingKind::Frequency,
            target: DisentangleTarget::HighAndLow,
            shuffle: true,
            detach_encoder: false,
        }
    }
}

/// Loss components of one pretext evaluation.
pub struct MmsdBreakdown<'t> {
    pub total: Var<'t>,
    /// Position-regression term (zero node when shuffling is off).
    pub position: Var<'t>,
    /// Per-modality frequency-origin terms.
    pub freq: Vec<Var<'t>>,
    /// Recipes generated this step (one per ordered pair and sample).
    pub recipes: Vec<MixRecipe>,
}

fn apply_mask(spec: &Tensor, mask: &Tensor) -> Tensor {
    // broadcast the (h x w) mask over leading axes of a complex tensor
    let hw = mask.numel();
    let mut out = spec.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        *v *= mask.data()[(i / 2) % hw];
    }
    Tensor::new_complex(spec.shape().to_vec(), out).expect("mask keeps shape")
}

/// `(P x C)` position-major map -> `(C, H, W)` channel planes.
fn channel_planes(map: &TokenMap) -> Tensor {
    let (h, w, c) = (map.h, map.w, map.channels);
    let p = h * w;
    let mut data = vec![0.0; c * p];
    for pos in 0..p {
        for ch in 0..c {
            data[ch * p + pos] = map.data()[pos * c + ch];
        }
    }
    Tensor::new(vec![c, h, w], data).expect("plane shape")
}

fn planes_to_map(planes: &Tensor, h: usize, w: usize) -> TokenMap {
    let c = planes.shape()[0];
    let p = h * w;
    let mut data = vec![0.0; p * c];
    for ch in 0..c {
        for pos in 0..p {
            data[pos * c + ch] = planes.data()[ch * p + pos];
        }
    }
    TokenMap::new(h, w, c, data).expect("map shape")
}

/// Per-sample spectral bands of one modality's token batch, as tape nodes.
struct BandedTokens<'t> {
    /// `(P x C)` raw tokens per sample.
    raw: Vec<Var<'t>>,
    /// `(C, H, W)` complex low/high spectra per sample (frequency mixing).
    low: Vec<Var<'t>>,
    high: Vec<Var<'t>>,
}

fn band_tokens<'t>(
    tokens: Var<'t>,
    batch: usize,
    grid: (usize, usize),
    mask_low: &Rc<Tensor>,
    mask_high: &Rc<Tensor>,
    need_spectra: bool,
) -> BandedTokens<'t> {
    let (h, w) = grid;
    let p = h * w;
    let c = tokens.shape()[1];
    let mut raw = Vec::with_capacity(batch);
    let mut low = Vec::with_capacity(batch);
    let mut high = Vec::with_capacity(batch);
    for i in 0..batch {
        let block = tokens.slice_rows(i * p, p);
        raw.push(block);
        if need_spectra {
            let planes = block.t().reshape(vec![c, h, w]);
            let spec = planes.fft2();
            low.push(spec.mul_const_bcast(mask_low.clone()));
            high.push(spec.mul_const_bcast(mask_high.clone()));
        }
    }
    BandedTokens { raw, low, high }
}

/// Evaluate the full pretext objective on one batch's token features.
///
/// `tokens[m]` is the `(B*P x C)` per-token feature batch of modality `m`
/// (pre-projector). Every ordered modality pair contributes one mixed
/// stream built from an independently shuffled partner batch.
pub fn mmsd_loss<'t>(
    tape: &'t Tape,
    bound: &BoundModel<'t>,
    tokens: &[Var<'t>],
    batch: usize,
    cfg: &MmsdConfig,
    rng: &mut impl Rng,
) -> Result<MmsdBreakdown<'t>> {
    let modalities = tokens.len();
    if modalities < 2 {
        return Err(Error::Config("pretext tasks need >= 2 modalities".into()));
    }
    let grid = bound
        .config
        .token_grid
        .ok_or_else(|| Error::Config("pretext tasks need token maps".into()))?;
    let (h, w) = grid;
    let p = h * w;
    let mask = if cfg.centered {
        FrequencyMask::centered(h, w, cfg.mask_radius)
    } else {
        FrequencyMask::uncentered(h, w, (0.0, 0.0), cfg.mask_radius)
    };
    let mask_low = Rc::new(mask.values().clone());
    let mask_high = Rc::new(mask.complement());
    let need_spectra = cfg.mixing == MixingKind::Frequency;

    let banded: Vec<BandedTokens> = tokens
        .iter()
        .map(|t| {
            let t = if cfg.detach_encoder { t.detach() } else { *t };
            band_tokens(t, batch, grid, &mask_low, &mask_high, need_spectra)
        })
        .collect();

    // target coordinates are shared across streams
    let mut coord_data = Vec::with_capacity(p * 2);
    let dummy = MixRecipe {
        modality_a: 0,
        modality_b: 1,
        grid,
        candidates: vec![Candidate::PureA; p],
        low_origin: vec![0; p],
        high_origin: vec![0; p],
        perm: (0..p).collect(),
    };
    for pos in 0..p {
        let (r, c) = dummy.position_coords(pos);
        coord_data.push(r);
        coord_data.push(c);
    }

    let zero = tape.scalar(0.0);
    let mut freq_terms = vec![zero; modalities];
    let mut pos_term = tape.scalar(0.0);
    let mut recipes = Vec::new();

    for ma in 0..modalities {
        for mb in 0..modalities {
            if ma == mb {
                continue;
            }
            // independently shuffled partner batch
            let mut partner: Vec<usize> = (0..batch).collect();
            for i in (1..batch).rev() {
                let j = rng.gen_range(0..=i);
                partner.swap(i, j);
            }

            let mut stream_parts = Vec::with_capacity(batch);
            let mut low_labels = Vec::with_capacity(batch * p);
            let mut high_labels = Vec::with_capacity(batch * p);
            let mut pos_targets = Vec::with_capacity(batch * p * 2);
            for i in 0..batch {
                let j = partner[i];
                let pure_a = banded[ma].raw[i];
                let pure_b = banded[mb].raw[j];
                let (n_candidates, mixed): (usize, Option<(Var, Var)>) = match cfg.mixing {
                    MixingKind::Frequency => {
                        let spec_ab = banded[ma].low[i].add(banded[mb].high[j]);
                        let spec_ba = banded[mb].low[j].add(banded[ma].high[i]);
                        let to_map = |s: Var<'t>| {
                            s.ifft2()
                                .real()
                                .reshape(vec![tokens[ma].shape()[1], p])
                                .t()
                        };
                        (4, Some((to_map(spec_ab), to_map(spec_ba))))
                    }
                    MixingKind::Spatial => (2, None),
                };

                let choices: Vec<Candidate> = (0..p)
                    .map(|_| Candidate::from_index(rng.gen_range(0..n_candidates)))
                    .collect();
                let perm: Vec<usize> = if cfg.shuffle {
                    let mut idx: Vec<usize> = (0..p).collect();
                    for k in (1..p).rev() {
                        let j = rng.gen_range(0..=k);
                        idx.swap(k, j);
                    }
                    idx
                } else {
                    (0..p).collect()
                };
                let (low_origin, high_origin): (Vec<usize>, Vec<usize>) =
                    choices.iter().map(|c| c.origins(ma, mb)).unzip();
                let recipe = MixRecipe {
                    modality_a: ma,
                    modality_b: mb,
                    grid,
                    candidates: choices,
                    low_origin,
                    high_origin,
                    perm,
                };
                recipe.validate()?;

                // stack candidates and gather (choice, position) per slot
                let stacked = match &mixed {
                    Some((ab, ba)) => concat_rows(&[pure_a, pure_b, *ab, *ba]),
                    None => concat_rows(&[pure_a, pure_b]),
                };
                let sel: Vec<usize> = (0..p)
                    .map(|q| {
                        let src = recipe.perm[q];
                        recipe.candidates[src].index() * p + src
                    })
                    .collect();
                stream_parts.push(stacked.select_rows(Rc::new(sel)));
                for q in 0..p {
                    let (l, hgh, (cr, cc)) = recipe.slot_labels(q);
                    low_labels.push(l);
                    high_labels.push(hgh);
                    pos_targets.push(cr);
                    pos_targets.push(cc);
                }
                recipes.push(recipe);
            }

            let stream = concat_rows(&stream_parts);
            match cfg.target {
                DisentangleTarget::HighOnly => {
                    let logits = bound.dec_high[ma].apply(stream)?;
                    freq_terms[ma] = freq_terms[ma].add(band_ce_rows(logits, &high_labels)?);
                }
                DisentangleTarget::LowOnly | DisentangleTarget::Modality => {
                    let logits = bound.dec_low[ma].apply(stream)?;
                    freq_terms[ma] = freq_terms[ma].add(band_ce_rows(logits, &low_labels)?);
                }
                DisentangleTarget::HighAndLow => {
                    let low_logits = bound.dec_low[ma].apply(stream)?;
                    let high_logits = bound.dec_high[ma].apply(stream)?;
                    freq_terms[ma] = freq_terms[ma]
                        .add(band_ce_rows(low_logits, &low_labels)?)
                        .add(band_ce_rows(high_logits, &high_labels)?);
                }
            }
            if cfg.shuffle {
                let pred = bound.dec_pos.apply(stream)?;
                let targets = tape.constant(Tensor::matrix(batch * p, 2, pos_targets)?);
                pos_term = pos_term.add(position_mse(pred, targets));
            }
        }
    }

    let mut total = pos_term;
    for f in &freq_terms {
        total = total.add(*f);
    }
    Ok(MmsdBreakdown {
        total,
        position: pos_term,
        freq: freq_terms,
        recipes,
    })
}

/// Debug sidecar: one JSON line per recipe, with optional per-recipe
/// spectral energies of the mixed maps.
pub fn dump_recipes(recipes: &[MixRecipe], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in recipes {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::numerics::grad;
    use approx::assert_abs_diff_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn test_map(h: usize, w: usize, c: usize, salt: f64) -> TokenMap {
        let data: Vec<f64> = (0..h * w * c)
            .map(|i| ((i as f64 + salt) * 0.61).sin())
            .collect();
        TokenMap::new(h, w, c, data).unwrap()
    }

    #[test]
    fn mask_partition_is_exact() {
        for (h, w, r) in [(8, 8, 1.0), (8, 8, 2.5), (14, 14, 1.0), (5, 7, 2.0)] {
            let m = FrequencyMask::centered(h, w, r);
            let comp = m.complement();
            for (a, b) in m.values().data().iter().zip(comp.data().iter()) {
                assert_eq!(a + b, 1.0);
                assert!(*a == 0.0 || *a == 1.0);
            }
        }
    }

    #[test]
    fn radius_one_selects_only_dc() {
        let m = FrequencyMask::centered(8, 8, 1.0);
        assert_eq!(m.selected(), 1);
        // the selected raw bin is DC (index 0,0)
        assert_eq!(m.values().at(0, 0), 1.0);
        let m = FrequencyMask::uncentered(8, 8, (0.0, 0.0), 1.0);
        assert_eq!(m.selected(), 1);
        assert_eq!(m.values().at(0, 0), 1.0);
    }

    #[test]
    fn freq_split_constant_map_dc_capture() {
        let c = 3;
        let map = TokenMap::new(4, 4, c, vec![2.0; 16 * c]).unwrap();
        let mask = FrequencyMask::centered(4, 4, 1.0);
        let (low, high) = freq_split(&map, &mask).unwrap();
        for (l, orig) in low.data().iter().zip(map.data().iter()) {
            assert_abs_diff_eq!(l, orig, epsilon = 1e-9);
        }
        for h in high.data() {
            assert!(h.abs() < 1e-9);
        }
    }

    #[test]
    fn freq_split_reconstructs_any_map() {
        let map = test_map(6, 5, 4, 0.3);
        let mask = FrequencyMask::centered(6, 5, 2.0);
        let (low, high) = freq_split(&map, &mask).unwrap();
        for ((l, h), orig) in low
            .data()
            .iter()
            .zip(high.data().iter())
            .zip(map.data().iter())
        {
            assert_abs_diff_eq!(l + h, *orig, epsilon = 1e-9);
        }
    }

    #[test]
    fn checkerboard_has_no_dc_component() {
        // pure Nyquist pattern: alternating +1/-1
        let (h, w) = (8, 8);
        let mut data = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                data[r * w + c] = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        let map = TokenMap::new(h, w, 1, data).unwrap();
        let mask = FrequencyMask::centered(h, w, 1.0);
        let (low, _) = freq_split(&map, &mask).unwrap();
        for v in low.data() {
            assert!(v.abs() < 1e-9, "checkerboard leaked into DC: {v}");
        }
    }

    #[test]
    fn mixing_with_self_is_identity() {
        let map = test_map(4, 4, 3, 1.1);
        let mask = FrequencyMask::centered(4, 4, 1.5);
        let (ab, ba) = cross_mix(&map, &map, &mask).unwrap();
        for (m, orig) in ab.data().iter().zip(map.data().iter()) {
            assert_abs_diff_eq!(m, orig, epsilon = 1e-9);
        }
        for (m, orig) in ba.data().iter().zip(map.data().iter()) {
            assert_abs_diff_eq!(m, orig, epsilon = 1e-9);
        }
    }

    #[test]
    fn mixed_low_band_matches_source_inside_mask() {
        let a = test_map(4, 4, 2, 0.0);
        let b = test_map(4, 4, 2, 5.0);
        let mask = FrequencyMask::centered(4, 4, 1.8);
        let (ab, _) = cross_mix(&a, &b, &mask).unwrap();
        let spec_ab = fft::fft2(&channel_planes(&ab)).unwrap();
        let spec_a = fft::fft2(&channel_planes(&a)).unwrap();
        let hw = 16;
        for (i, (x, y)) in spec_ab
            .data()
            .chunks(2)
            .zip(spec_a.data().chunks(2))
            .enumerate()
        {
            if mask.values().data()[(i) % hw] == 1.0 {
                assert_abs_diff_eq!(x[0], y[0], epsilon = 1e-9);
                assert_abs_diff_eq!(x[1], y[1], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn energy_conservation_under_disjoint_support() {
        let a = test_map(8, 8, 3, 0.4);
        let b = test_map(8, 8, 3, 9.7);
        let mask = FrequencyMask::centered(8, 8, 2.3);
        let (a_low, _) = freq_split(&a, &mask).unwrap();
        let (_, b_high) = freq_split(&b, &mask).unwrap();
        let (ab, _) = cross_mix(&a, &b, &mask).unwrap();
        let e = |m: &TokenMap| m.data().iter().map(|v| v * v).sum::<f64>();
        let lhs = e(&ab);
        let rhs = e(&a_low) + e(&b_high);
        assert!(
            (lhs - rhs).abs() / rhs < 1e-8,
            "energy {lhs} vs parts {rhs}"
        );
    }

    #[test]
    fn candidate_sampling_uniform_and_permutation_round_trip() {
        let maps: Vec<TokenMap> = (0..4).map(|i| test_map(4, 4, 2, i as f64)).collect();
        let refs: [&TokenMap; 4] = [&maps[0], &maps[1], &maps[2], &maps[3]];
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut counts = [0usize; 4];
        let trials = 6250; // 16 positions each => 1e5 draws
        for _ in 0..trials {
            let (_, recipe) = sample_and_shuffle(&refs, (0, 1), true, &mut rng).unwrap();
            for c in &recipe.candidates {
                counts[c.index()] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 0.25).abs() < 0.01, "candidate frequency {f}");
        }

        // identity-permutation hook
        let (_, recipe) = sample_and_shuffle(&refs, (0, 1), false, &mut rng).unwrap();
        for (q, &p) in recipe.perm.iter().enumerate() {
            assert_eq!(q, p);
        }

        // applying perm then its inverse recovers the unshuffled sequence
        let (shuffled, recipe) = sample_and_shuffle(&refs, (0, 1), true, &mut rng).unwrap();
        let p = recipe.positions();
        let c = maps[0].channels;
        let mut unshuffled = vec![0.0; p * c];
        for q in 0..p {
            let src = recipe.perm[q];
            unshuffled[src * c..(src + 1) * c].copy_from_slice(shuffled.token(q));
        }
        for (pos, choice) in recipe.candidates.iter().enumerate() {
            let expect = refs[choice.index()].token(pos);
            assert_eq!(&unshuffled[pos * c..(pos + 1) * c], expect);
        }

        // the recipe is sufficient statistics: labels re-derived from the
        // candidate choices match the stored ones
        for (i, &ch) in recipe.candidates.iter().enumerate() {
            let (l, h) = ch.origins(0, 1);
            assert_eq!(recipe.low_origin[i], l);
            assert_eq!(recipe.high_origin[i], h);
        }
    }

    #[test]
    fn oracle_and_uniform_band_losses() {
        let tape = Tape::new();
        let labels = [0usize, 2, 1, 0];
        // oracle logits: huge margin on the true label
        let mut data = vec![0.0; 4 * 3];
        for (i, &l) in labels.iter().enumerate() {
            data[i * 3 + l] = 200.0;
        }
        let logits = tape.constant(Tensor::matrix(4, 3, data).unwrap());
        let loss = band_ce_rows(logits, &labels).unwrap();
        assert!(loss.item() < 1e-8);

        // uniform logits: ln M per term
        let logits = tape.constant(Tensor::zeros(vec![4, 3]));
        let loss = band_ce_rows(logits, &labels).unwrap();
        assert_abs_diff_eq!(loss.item(), 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn position_loss_oracle_and_constant_center() {
        let tape = Tape::new();
        let recipe = MixRecipe {
            modality_a: 0,
            modality_b: 1,
            grid: (4, 4),
            candidates: vec![Candidate::PureA; 16],
            low_origin: vec![0; 16],
            high_origin: vec![0; 16],
            perm: (0..16).collect(),
        };
        let mut targets = Vec::new();
        for p in 0..16 {
            let (r, c) = recipe.position_coords(p);
            targets.push(r);
            targets.push(c);
        }
        let t = tape.constant(Tensor::matrix(16, 2, targets.clone()).unwrap());
        // oracle regressor: zero loss
        assert_eq!(position_mse(t, t).item(), 0.0);

        // constant-center predictor pays the grid variance (computed
        // directly as the oracle)
        let center = tape.constant(Tensor::matrix(16, 2, vec![0.5; 32]).unwrap());
        let expect: f64 = targets
            .chunks(2)
            .map(|rc| (rc[0] - 0.5).powi(2) + (rc[1] - 0.5).powi(2))
            .sum::<f64>()
            / 16.0;
        assert_abs_diff_eq!(position_mse(center, t).item(), expect, epsilon = 1e-12);

        // the grid variance approaches 2/12 = 1/6 as the grid grows
        let big = MixRecipe {
            modality_a: 0,
            modality_b: 1,
            grid: (16, 16),
            candidates: vec![Candidate::PureA; 256],
            low_origin: vec![0; 256],
            high_origin: vec![0; 256],
            perm: (0..256).collect(),
        };
        let var: f64 = (0..256)
            .map(|p| {
                let (r, c) = big.position_coords(p);
                (r - 0.5).powi(2) + (c - 0.5).powi(2)
            })
            .sum::<f64>()
            / 256.0;
        assert!((var - 1.0 / 6.0).abs() < 0.03, "grid variance {var}");
    }

    fn mmsd_model() -> Model {
        Model::new(ModelConfig {
            modalities: 3,
            input_dim: 6,
            enc_hidden: 8,
            feature_dim: 8,
            token_grid: Some((3, 3)),
            dec_hidden: 8,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn batch_inputs(b: usize) -> Vec<Tensor> {
        (0..3)
            .map(|m| {
                let data: Vec<f64> = (0..b * 6)
                    .map(|i| ((i + 17 * m) as f64 * 0.23).sin())
                    .collect();
                Tensor::matrix(b, 6, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn pipeline_gradients_reach_the_encoder() {
        let model = mmsd_model();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let fwd = bound.forward(&tape, &batch_inputs(4)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let out = mmsd_loss(
            &tape,
            &bound,
            fwd.tokens.as_ref().unwrap(),
            4,
            &MmsdConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(out.total.item().is_finite());
        let enc_w = bound.encoders[0].l1.w;
        let g = grad(out.total, &[enc_w], false).unwrap()[0].value();
        let norm: f64 = g.data().iter().map(|v| v * v).sum::<f64>();
        assert!(norm > 0.0, "encoder gradient vanished");

        // stop-gradient ablation: encoder sees nothing
        let cfg = MmsdConfig {
            detach_encoder: true,
            ..MmsdConfig::default()
        };
        let out = mmsd_loss(
            &tape,
            &bound,
            fwd.tokens.as_ref().unwrap(),
            4,
            &cfg,
            &mut rng,
        )
        .unwrap();
        let g = grad(out.total, &[enc_w], false).unwrap()[0].value();
        assert!(g.data().iter().all(|&v| v == 0.0));
        // but the decoupler heads still learn
        let g = grad(out.total, &[bound.dec_low[0].l1.w], false).unwrap()[0].value();
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn breakdown_sums_and_no_shuffle_drops_position_term() {
        let model = mmsd_model();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let fwd = bound.forward(&tape, &batch_inputs(4)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let out = mmsd_loss(
            &tape,
            &bound,
            fwd.tokens.as_ref().unwrap(),
            4,
            &MmsdConfig::default(),
            &mut rng,
        )
        .unwrap();
        let sum = out.position.item() + out.freq.iter().map(|f| f.item()).sum::<f64>();
        assert_abs_diff_eq!(out.total.item(), sum, epsilon = 1e-12);
        assert!(out.position.item() > 0.0);

        let cfg = MmsdConfig {
            shuffle: false,
            ..MmsdConfig::default()
        };
        let out = mmsd_loss(
            &tape,
            &bound,
            fwd.tokens.as_ref().unwrap(),
            4,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.position.item(), 0.0);
        // the position head receives no gradient without shuffling
        let g = grad(out.total, &[bound.dec_pos.l1.w], false).unwrap()[0].value();
        assert!(g.data().iter().all(|&v| v == 0.0));
        // recipes carry identity permutations
        for r in &out.recipes {
            for (q, &p) in r.perm.iter().enumerate() {
                assert_eq!(q, p);
            }
        }
    }

    #[test]
    fn spatial_mixing_uses_two_candidates() {
        let model = mmsd_model();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let fwd = bound.forward(&tape, &batch_inputs(3)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let cfg = MmsdConfig {
            mixing: MixingKind::Spatial,
            target: DisentangleTarget::Modality,
            ..MmsdConfig::default()
        };
        let out = mmsd_loss(
            &tape,
            &bound,
            fwd.tokens.as_ref().unwrap(),
            3,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!(out.total.item().is_finite());
        for r in &out.recipes {
            assert!(r
                .candidates
                .iter()
                .all(|c| matches!(c, Candidate::PureA | Candidate::PureB)));
            // pure tokens: low and high origins agree
            for (l, h) in r.low_origin.iter().zip(r.high_origin.iter()) {
                assert_eq!(l, h);
            }
        }
    }

    #[test]
    fn recipe_dump_round_trips_as_json_lines() {
        let maps: Vec<TokenMap> = (0..4).map(|i| test_map(3, 3, 2, i as f64)).collect();
        let refs: [&TokenMap; 4] = [&maps[0], &maps[1], &maps[2], &maps[3]];
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let recipes: Vec<MixRecipe> = (0..3)
            .map(|_| sample_and_shuffle(&refs, (0, 2), true, &mut rng).unwrap().1)
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recipes.jsonl");
        dump_recipes(&recipes, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: Vec<MixRecipe> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed.len(), 3);
        for (a, b) in recipes.iter().zip(parsed.iter()) {
            assert_eq!(a.perm, b.perm);
            assert_eq!(a.low_origin, b.low_origin);
            b.validate().unwrap();
        }
    }
}
