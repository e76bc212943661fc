//! Exact information quantities on tiny binary-image worlds, by enumeration.
//!
//! A world holds a distribution over binary images of side at most 3, a label table
//! `p(c | i)`, per-pixel visibility probabilities `rho(i)` and optionally a per-pixel
//! growth kernel turning hidden pixels visible. Every identity is checked by summing over
//! the full joint table of `(i, c, m, m')`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::trainer::{CondTerm, COND_TERMS};
use crate::types::RHO_EPSILON;

pub const CELL_LIMIT: usize = 10_000_000;
pub const MAX_SIDE: usize = 3;
pub const TOLERANCE: f64 = 1e-9;

/// Probability that a hidden pixel becomes visible, per pixel. Visible pixels stay visible.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthKernel {
    pub reveal: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteWorld {
    pub side: usize,
    /// `(code, probability)`; bit `k` of a code is pixel `k` in row-major order.
    pub images: Vec<(u32, f64)>,
    pub categories: usize,
    /// `p(c | i)` per image.
    pub labels: Vec<Vec<f64>>,
    /// Visibility probability per image and pixel.
    pub rho: Vec<Vec<f64>>,
    pub growth: Option<GrowthKernel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variable {
    Image,
    Label,
    Mask,
    GrownMask,
    /// Visible pixels together with the mask.
    Masked,
    GrownMasked,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub image: u32,
    pub label: usize,
    pub mask: u32,
    pub grown: u32,
    pub p: f64,
}

impl Cell {
    fn value(&self, v: Variable) -> u64 {
        match v {
            Variable::Image => self.image as u64,
            Variable::Label => self.label as u64,
            Variable::Mask => self.mask as u64,
            Variable::GrownMask => self.grown as u64,
            Variable::Masked => (((self.image & self.mask) as u64) << 32) | self.mask as u64,
            Variable::GrownMasked => (((self.image & self.grown) as u64) << 32) | self.grown as u64,
        }
    }
}

/// The full joint table of one world.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub pixels: usize,
    pub cells: Vec<Cell>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (sum - 1.0).abs() > 1e-12 {
        return Err(Error::config(format!("{what} is not a distribution (sum {sum})")));
    }
    Ok(())
}

impl DiscreteWorld {
    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    /// Number of cells the joint table would hold.
    pub fn cell_count(&self) -> usize {
        let masks = 1usize << self.pixels();
        let grown = if self.growth.is_some() { masks } else { 1 };
        self.images.len().saturating_mul(self.categories).saturating_mul(masks).saturating_mul(grown)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if self.side == 0 || self.side > MAX_SIDE {
            return Err(Error::config(format!("world side {} outside 1..={MAX_SIDE}", self.side)));
        }
        let probs: Vec<f64> = self.images.iter().map(|&(_, p)| p).collect();
        check_distribution(&probs, "image distribution")?;
        if self.labels.len() != self.images.len() || self.rho.len() != self.images.len() {
            return Err(Error::config("one label row and one rho row per image"));
        }
        for row in &self.labels {
            if row.len() != self.categories {
                return Err(Error::config("label rows must have one entry per category"));
            }
            check_distribution(row, "label row")?;
        }
        for &(code, _) in &self.images {
            if code >= 1 << n {
                return Err(Error::config(format!("image code {code} exceeds {n} pixels")));
            }
        }
        let rows = self.rho.iter().chain(self.growth.iter().map(|g| &g.reveal));
        for row in rows {
            if row.len() != n || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::config("per-pixel probabilities must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// A world without growth: `m' = m`.
    pub fn without_growth(&self) -> Self {
        DiscreteWorld {
            growth: None,
            ..self.clone()
        }
    }

    pub fn with_rho(&self, rho: Vec<Vec<f64>>) -> Self {
        DiscreteWorld { rho, ..self.clone() }
    }
}

fn bits(code: u32, k: usize) -> bool {
    code >> k & 1 == 1
}

/// Probability of drawing mask `mask` when each pixel is visible with `rho[k]`.
fn mask_probability(rho: &[f64], mask: u32) -> f64 {
    rho.iter()
        .enumerate()
        .map(|(k, &p)| if bits(mask, k) { p } else { 1.0 - p })
        .product()
}

fn growth_probability(reveal: &[f64], mask: u32, grown: u32) -> f64 {
    let mut p = 1.0;
    for (k, &q) in reveal.iter().enumerate() {
        p *= match (bits(mask, k), bits(grown, k)) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, true) => q,
            (false, false) => 1.0 - q,
        };
    }
    p
}

/// Every `(i, c, m, m')` cell with its probability; refuses tables above `CELL_LIMIT`.
pub fn enumerate_joint(world: &DiscreteWorld) -> Result<Joint> {
    world.validate()?;
    let cells = world.cell_count();
    if cells > CELL_LIMIT {
        return Err(Error::TooLarge {
            cells: cells as u128,
            limit: CELL_LIMIT as u128,
        });
    }
    let n = world.pixels();
    let masks = 1u32 << n;
    let mut out = Vec::with_capacity(cells);
    for (k, &(image, pi)) in world.images.iter().enumerate() {
        for (label, &pc) in world.labels[k].iter().enumerate() {
            for mask in 0..masks {
                let pm = mask_probability(&world.rho[k], mask);
                match &world.growth {
                    None => out.push(Cell {
                        image,
                        label,
                        mask,
                        grown: mask,
                        p: pi * pc * pm,
                    }),
                    Some(g) => {
                        for grown in 0..masks {
                            out.push(Cell {
                                image,
                                label,
                                mask,
                                grown,
                                p: pi * pc * pm * growth_probability(&g.reveal, mask, grown),
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(Joint { pixels: n, cells: out })
}

impl Joint {
    pub fn total(&self) -> f64 {
        self.cells.iter().map(|c| c.p).sum()
    }

    /// Marginal table of the chosen variables.
    pub fn marginal(&self, vars: &[Variable]) -> BTreeMap<Vec<u64>, f64> {
        let mut out: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
        for c in &self.cells {
            if c.p > 0.0 {
                *out.entry(vars.iter().map(|&v| c.value(v)).collect()).or_default() += c.p;
            }
        }
        out
    }

    /// Joint entropy of the chosen variables in nats.
    pub fn entropy(&self, vars: &[Variable]) -> f64 {
        self.marginal(vars).values().map(|&p| -p * p.ln()).sum()
    }

    /// `H(a | b)`.
    pub fn conditional_entropy(&self, a: &[Variable], b: &[Variable]) -> f64 {
        let ab: Vec<Variable> = a.iter().chain(b).cloned().collect();
        self.entropy(&ab) - self.entropy(b)
    }

    /// `I(a; b)`.
    pub fn mutual_information(&self, a: &[Variable], b: &[Variable]) -> f64 {
        let ab: Vec<Variable> = a.iter().chain(b).cloned().collect();
        self.entropy(a) + self.entropy(b) - self.entropy(&ab)
    }

    /// `I(a; b | z)`.
    pub fn conditional_mi(&self, a: &[Variable], b: &[Variable], z: &[Variable]) -> f64 {
        let cat = |xs: &[&[Variable]]| -> Vec<Variable> { xs.iter().flat_map(|x| x.iter().cloned()).collect() };
        self.entropy(&cat(&[a, z])) + self.entropy(&cat(&[b, z])) - self.entropy(&cat(&[a, b, z])) - self.entropy(z)
    }
}

use Variable::*;

/// `beta I(I*M; I) - I(I*M'; C)`.
pub fn ib_objective(joint: &Joint, beta: f64) -> f64 {
    beta * joint.mutual_information(&[Masked], &[Image]) - joint.mutual_information(&[GrownMasked], &[Label])
}

/// `beta' I(I*M; I | C) - I(I*M'; C)`.
pub fn ceb_objective(joint: &Joint, beta_prime: f64) -> f64 {
    beta_prime * joint.conditional_mi(&[Masked], &[Image], &[Label]) - joint.mutual_information(&[GrownMasked], &[Label])
}

/// Closed-form mask entropy `sum_i p(i) sum_k h(rho_k(i))`.
pub fn closed_form_mask_entropy(world: &DiscreteWorld) -> Result<f64> {
    let mut total = 0.0;
    for (k, &(_, p)) in world.images.iter().enumerate() {
        let rho = crate::types::MaskProbability::new(world.side, world.side, world.rho[k].clone())?;
        total += p * crate::mask::mask_entropy_continuous(&rho);
    }
    Ok(total)
}

/// Entropy terms of the conditional objective, by the names the trainer uses.
pub fn cond_term_entropy(joint: &Joint, term: CondTerm) -> f64 {
    match term {
        CondTerm::MaskedGivenMask => joint.conditional_entropy(&[Masked], &[Mask]),
        CondTerm::Mask => joint.entropy(&[Mask]),
        CondTerm::MaskGivenImage => joint.conditional_entropy(&[Mask], &[Image]),
        CondTerm::ImageGivenMaskLabel => joint.conditional_entropy(&[Image], &[Mask, Label]),
        CondTerm::LabelGivenMasked => joint.conditional_entropy(&[Label], &[Masked]),
    }
}

/// The conditional objective assembled from entropy terms with the given signs, minus `H(I)`.
/// With the trainer's signs this equals `beta I(I*M; I | M) - I(C'; I*M | M)`.
pub fn cond_objective_from_terms(joint: &Joint, beta: f64, terms: &[(CondTerm, f64)]) -> f64 {
    let mut total = -joint.entropy(&[Image]);
    for &(term, sign) in terms {
        let weight = if term == CondTerm::MaskedGivenMask { beta } else { 1.0 };
        total += sign * weight * cond_term_entropy(joint, term);
    }
    total
}

pub fn cond_objective(joint: &Joint, beta: f64) -> f64 {
    beta * joint.conditional_mi(&[Masked], &[Image], &[Mask]) - joint.conditional_mi(&[Label], &[Masked], &[Mask])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub identity: String,
    pub world_seed: u64,
    pub max_deviation: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl OracleRecord {
    fn new(identity: &str, world_seed: u64, max_deviation: f64) -> Self {
        OracleRecord {
            identity: identity.into(),
            world_seed,
            max_deviation,
            pass: max_deviation <= TOLERANCE,
            note: None,
        }
    }
}

/// Options for drawing random worlds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldShape {
    pub side: usize,
    pub categories: usize,
    /// Labels are a deterministic function of the image.
    pub deterministic_labels: bool,
    pub growth: bool,
}

fn random_distribution<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let s: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
    // Put the rounding residue on the largest entry so the sum is 1 to machine precision.
    let err = 1.0 - p.iter().sum::<f64>();
    let k = (0..n).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
    p[k] += err;
    p
}

/// Random visibility probabilities; some pixels sit at the saturation bounds the mask model
/// clamps to.
pub fn random_rho<R: Rng>(pixels: usize, rng: &mut R) -> Vec<f64> {
    (0..pixels)
        .map(|_| match rng.gen_range(0..6) {
            0 => RHO_EPSILON,
            1 => 1.0 - RHO_EPSILON,
            _ => rng.gen_range(0.02..0.98),
        })
        .collect()
}

/// A seeded random world; image support is all `2^(side^2)` images, or 64 of them for side 3.
pub fn random_world(shape: WorldShape, seed: u64) -> DiscreteWorld {
    let mut rng = substream(seed, &[0x0c]);
    let n = shape.side * shape.side;
    let mut codes: Vec<u32> = (0..1u32 << n).collect();
    if n > 4 {
        for i in 0..64 {
            let j = rng.gen_range(i..codes.len());
            codes.swap(i, j);
        }
        codes.truncate(64);
    }
    let p = random_distribution(codes.len(), &mut rng);
    let labels = codes
        .iter()
        .map(|_| {
            if shape.deterministic_labels {
                let mut row = vec![0.0; shape.categories];
                row[rng.gen_range(0..shape.categories)] = 1.0;
                row
            } else {
                random_distribution(shape.categories, &mut rng)
            }
        })
        .collect();
    let rho = codes.iter().map(|_| random_rho(n, &mut rng)).collect();
    let growth = shape.growth.then(|| GrowthKernel {
        reveal: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    });
    DiscreteWorld {
        side: shape.side,
        images: codes.into_iter().zip(p).collect(),
        categories: shape.categories,
        labels,
        rho,
        growth,
    }
}

/// For two mask policies: `Q'(z1) - Q'(z2) = (1 + b') (Q_b(z1) - Q_b(z2))` with
/// `b = b' / (1 + b')`. Only defined without growth.
pub fn verify_ib_ceb_equivalence(world: &DiscreteWorld, other_rho: Vec<Vec<f64>>, beta_prime: f64) -> Result<f64> {
    if world.growth.is_some() {
        return Err(Error::Refused("the equivalence holds only when the grown mask equals the mask".into()));
    }
    let beta = beta_prime / (1.0 + beta_prime);
    let a = enumerate_joint(world)?;
    let b = enumerate_joint(&world.with_rho(other_rho))?;
    let lhs = ceb_objective(&a, beta_prime) - ceb_objective(&b, beta_prime);
    let rhs = (1.0 + beta_prime) * (ib_objective(&a, beta) - ib_objective(&b, beta));
    Ok((lhs - rhs).abs())
}

/// `I(C'; I*M | M) = H(M|I) + H(I) - H(I|M,C') - H(M) - H(C'|I*M)`; needs `c'` a function of `i`.
pub fn verify_appendix_b(world: &DiscreteWorld) -> Result<f64> {
    let j = enumerate_joint(&world.without_growth())?;
    let lhs = j.conditional_mi(&[Label], &[Masked], &[Mask]);
    let rhs = j.conditional_entropy(&[Mask], &[Image]) + j.entropy(&[Image])
        - j.conditional_entropy(&[Image], &[Mask, Label])
        - j.entropy(&[Mask])
        - j.conditional_entropy(&[Label], &[Masked]);
    Ok((lhs - rhs).abs())
}

/// The conditional objective as the loss assembles it (signs from `terms`) against its
/// definition by conditional mutual informations.
pub fn verify_cond_objective(world: &DiscreteWorld, beta: f64, terms: &[(CondTerm, f64)]) -> Result<f64> {
    let j = enumerate_joint(&world.without_growth())?;
    Ok((cond_objective(&j, beta) - cond_objective_from_terms(&j, beta, terms)).abs())
}

/// Chain rule `I(C; I*M', M) = I(C; M) + I(C; I*M' | M)` and its image counterpart.
pub fn verify_chain_rule(world: &DiscreteWorld) -> Result<f64> {
    let j = enumerate_joint(world)?;
    let a = j.mutual_information(&[Label], &[GrownMasked, Mask]);
    let b = j.mutual_information(&[Label], &[Mask]) + j.conditional_mi(&[Label], &[GrownMasked], &[Mask]);
    let c = j.mutual_information(&[Image], &[Label, Mask]);
    let d = j.mutual_information(&[Image], &[Mask]) + j.conditional_mi(&[Image], &[Label], &[Mask]);
    Ok((a - b).abs().max((c - d).abs()))
}

/// Closed-form mask entropy against the enumerated `H(M|I)`.
pub fn verify_mask_entropy(world: &DiscreteWorld) -> Result<f64> {
    let j = enumerate_joint(&world.without_growth())?;
    Ok((closed_form_mask_entropy(world)? - j.conditional_entropy(&[Mask], &[Image])).abs())
}

/// Tabulated models: a decoder over masked-image values and a classifier over grown
/// masked images. Missing entries default to a tiny floor before normalization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TabulatedModels {
    pub decoder: BTreeMap<u64, f64>,
    pub classifier: BTreeMap<u64, Vec<f64>>,
}

/// True marginal decoder and true conditional classifier.
pub fn exact_models(joint: &Joint, categories: usize) -> TabulatedModels {
    let decoder = joint.marginal(&[Masked]).into_iter().map(|(k, p)| (k[0], p)).collect();
    let pair = joint.marginal(&[GrownMasked, Label]);
    let given = joint.marginal(&[GrownMasked]);
    let mut classifier: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (k, p) in pair {
        classifier.entry(k[0]).or_insert_with(|| vec![0.0; categories])[k[1] as usize] = p / given[&vec![k[0]]];
    }
    TabulatedModels { decoder, classifier }
}

/// Random models covering the support of `joint`.
pub fn random_models<R: Rng>(joint: &Joint, categories: usize, rng: &mut R) -> TabulatedModels {
    let keys: Vec<u64> = joint.marginal(&[Masked]).into_keys().map(|k| k[0]).collect();
    let probs = random_distribution(keys.len(), rng);
    let classifier = joint
        .marginal(&[GrownMasked])
        .into_keys()
        .map(|k| (k[0], random_distribution(categories, rng)))
        .collect();
    TabulatedModels {
        decoder: keys.into_iter().zip(probs).collect(),
        classifier,
    }
}

/// Cross-entropies `(-E log g(i*m), -E log h(c | i*m'))` of tabulated models.
pub fn model_cross_entropies(joint: &Joint, models: &TabulatedModels) -> (f64, f64) {
    let mut g = 0.0;
    let mut h = 0.0;
    for c in &joint.cells {
        if c.p == 0.0 {
            continue;
        }
        let dg = models.decoder.get(&c.value(Masked)).copied().unwrap_or(0.0);
        let dh = models
            .classifier
            .get(&c.value(GrownMasked))
            .map(|row| row[c.label])
            .unwrap_or(0.0);
        g -= c.p * dg.ln();
        h -= c.p * dh.ln();
    }
    (g, h)
}

/// Slack of the two variational bounds (cross-entropy minus exact entropy); both must be
/// non-negative up to `TOLERANCE`.
pub fn verify_variational_bound(joint: &Joint, models: &TabulatedModels) -> (f64, f64) {
    let (g, h) = model_cross_entropies(joint, models);
    (
        g - joint.entropy(&[Masked]),
        h - joint.conditional_entropy(&[Label], &[GrownMasked]),
    )
}

/// `I(I*M'; C) - I(I*M; C)` on one world with growth; negative values violate the
/// monotonicity claim.
pub fn probe_growth_monotonicity(world: &DiscreteWorld) -> Result<f64> {
    if world.growth.is_none() {
        return Err(Error::config("monotonicity probe needs a growth kernel"));
    }
    let j = enumerate_joint(world)?;
    Ok(j.mutual_information(&[GrownMasked], &[Label]) - j.mutual_information(&[Masked], &[Label]))
}

/// Entropy and information values of a world are non-negative.
pub fn check_non_negative(joint: &Joint) -> f64 {
    let values = [
        joint.entropy(&[Image]),
        joint.entropy(&[Masked]),
        joint.conditional_entropy(&[Label], &[GrownMasked]),
        joint.mutual_information(&[Masked], &[Image]),
        joint.mutual_information(&[GrownMasked], &[Label]),
        joint.conditional_mi(&[Label], &[Masked], &[Mask]),
        joint.conditional_mi(&[Masked], &[Image], &[Label]),
    ];
    values.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max)
}

/// Seeds `seed..seed + worlds` through every identity; one record per identity and world,
/// plus one summary record for the monotonicity probe.
pub fn run_suite(seed: u64, worlds: usize) -> Result<Vec<OracleRecord>> {
    run_suite_with_terms(seed, worlds, &COND_TERMS)
}

/// As `run_suite`, with the conditional objective's term signs supplied by the caller.
pub fn run_suite_with_terms(seed: u64, worlds: usize, terms: &[(CondTerm, f64)]) -> Result<Vec<OracleRecord>> {
    let mut out = Vec::new();
    let mut violations = 0usize;
    let mut probes = 0usize;
    for w in 0..worlds as u64 {
        let s = seed.wrapping_add(w);
        let mut rng = substream(s, &[0x0d]);
        let side = if w % 5 == 4 { 3 } else { 2 };
        let k = 2 + (w % 3) as usize;
        let plain = random_world(
            WorldShape {
                side,
                categories: k,
                deterministic_labels: false,
                growth: false,
            },
            s,
        );
        let functional = random_world(
            WorldShape {
                side,
                categories: k,
                deterministic_labels: true,
                growth: false,
            },
            s,
        );
        let grown = random_world(
            WorldShape {
                side: 2,
                categories: k,
                deterministic_labels: false,
                growth: true,
            },
            s,
        );
        let beta_prime = rng.gen_range(0.05..5.0);
        let other: Vec<Vec<f64>> = plain.rho.iter().map(|r| random_rho(r.len(), &mut rng)).collect();
        out.push(OracleRecord::new(
            "ib_ceb_equivalence",
            s,
            verify_ib_ceb_equivalence(&plain, other, beta_prime)?,
        ));
        out.push(OracleRecord::new("conditional_mi_decomposition", s, verify_appendix_b(&functional)?));
        let beta = rng.gen_range(0.05..5.0);
        out.push(OracleRecord::new(
            "conditional_objective_terms",
            s,
            verify_cond_objective(&functional, beta, terms)?,
        ));
        out.push(OracleRecord::new("mi_chain_rule", s, verify_chain_rule(&grown)?));
        out.push(OracleRecord::new("mask_entropy_closed_form", s, verify_mask_entropy(&plain)?));

        let joint = enumerate_joint(&grown)?;
        let exact = exact_models(&joint, k);
        let (eg, eh) = verify_variational_bound(&joint, &exact);
        let mut worst = eg.abs().max(eh.abs());
        for _ in 0..3 {
            let (sg, sh) = verify_variational_bound(&joint, &random_models(&joint, k, &mut rng));
            worst = worst.max((-sg).max(0.0)).max((-sh).max(0.0));
        }
        out.push(OracleRecord::new("variational_bound", s, worst));
        out.push(OracleRecord::new("non_negativity", s, check_non_negative(&joint)));

        probes += 1;
        if probe_growth_monotonicity(&grown)? < -TOLERANCE {
            violations += 1;
        }
    }
    out.push(OracleRecord {
        identity: "growth_monotonicity_probe".into(),
        world_seed: seed,
        max_deviation: 0.0,
        pass: true,
        note: Some(format!("{violations} of {probes} worlds lose label information under growth")),
    });
    Ok(out)
}

pub fn suite_passes(records: &[OracleRecord]) -> bool {
    records.iter().all(|r| r.pass)
}

pub fn records_to_jsonl(records: &[OracleRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests;
