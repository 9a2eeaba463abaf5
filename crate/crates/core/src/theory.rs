//! Finite joint models `p(z, x, y)` on which the sufficiency statement and
//! its corollary can be checked by enumeration.
//!
//! `Y` is a set of integer points in `Z^d`, `Pi` a coordinate projection and
//! `B` an integer affine map `s -> scale * s + shift` (coordinatewise) that
//! must be injective on the projected points.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::report::fmt_sig;

/// Deviations below this count as exact equality.
pub const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("conditioning event has probability zero")]
    ZeroProbability,
}

pub type Result<T, E = TheoryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    Z,
    X,
    Y,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJointModel {
    pub nz: usize,
    pub nx: usize,
    /// Points of `Y`, all of the same dimension.
    pub ys: Vec<Vec<i64>>,
    /// `p[(z * nx + x) * ny + y]`.
    pub table: Vec<f64>,
    /// Coordinates kept by `Pi`; the others are zeroed.
    pub keep: Vec<bool>,
    pub b_scale: Vec<i64>,
    pub b_shift: Vec<i64>,
}

impl DiscreteJointModel {
    pub fn ny(&self) -> usize {
        self.ys.len()
    }

    pub fn p(&self, z: usize, x: usize, y: usize) -> f64 {
        self.table[(z * self.nx + x) * self.ny() + y]
    }

    pub fn project(&self, y: &[i64]) -> Vec<i64> {
        y.iter().zip(&self.keep).map(|(&v, &k)| if k { v } else { 0 }).collect()
    }

    pub fn apply_b(&self, s: &[i64]) -> Vec<i64> {
        s.iter().zip(self.b_scale.iter().zip(&self.b_shift)).map(|(&v, (&a, &b))| a * v + b).collect()
    }

    /// `B(Pi y)` for the `y`-th point.
    pub fn feature(&self, y: usize) -> Vec<i64> {
        self.apply_b(&self.project(&self.ys[y]))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TheoryError::Invalid(m));
        if self.nz == 0 || self.nx == 0 || self.ys.is_empty() {
            return bad("every variable needs at least one value".into());
        }
        let d = self.keep.len();
        if self.ys.iter().any(|y| y.len() != d) || self.b_scale.len() != d || self.b_shift.len() != d {
            return bad(format!("points, projector and B must all have dimension {d}"));
        }
        for (i, a) in self.ys.iter().enumerate() {
            if self.ys[..i].contains(a) {
                return bad(format!("point {a:?} listed twice"));
            }
        }
        if self.table.len() != self.nz * self.nx * self.ny() {
            return bad(format!("table has {} entries, expected {}", self.table.len(), self.nz * self.nx * self.ny()));
        }
        if let Some(v) = self.table.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return bad(format!("negative or non-finite probability {v}"));
        }
        let total: f64 = self.table.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("table sums to {total}"));
        }
        let mut seen: BTreeMap<Vec<i64>, Vec<i64>> = BTreeMap::new();
        for y in &self.ys {
            let s = self.project(y);
            let f = self.apply_b(&s);
            if let Some(prev) = seen.insert(f.clone(), s.clone()) {
                if prev != s {
                    return bad(format!("B maps {prev:?} and {s:?} to {f:?}"));
                }
            }
        }
        Ok(())
    }

    /// Normalised joint restricted to the points where `event` holds.
    pub fn condition_on(&self, event: impl Fn(usize, usize, usize) -> bool) -> Result<Pmf> {
        let ny = self.ny();
        let mut t = vec![0.0; self.table.len()];
        let mut mass = 0.0;
        for z in 0..self.nz {
            for x in 0..self.nx {
                for y in 0..ny {
                    if event(z, x, y) {
                        let i = (z * self.nx + x) * ny + y;
                        t[i] = self.table[i];
                        mass += t[i];
                    }
                }
            }
        }
        if mass <= 0.0 {
            return Err(TheoryError::ZeroProbability);
        }
        t.iter_mut().for_each(|v| *v /= mass);
        Ok(Pmf { dims: [self.nz, self.nx, ny], table: t })
    }

    /// Joint conditioned on `variable = value`; `None` conditions on everything.
    pub fn conditional(&self, condition: Option<(Variable, usize)>) -> Result<Pmf> {
        match condition {
            None => self.condition_on(|_, _, _| true),
            Some((v, value)) => self.condition_on(|z, x, y| match v {
                Variable::Z => z == value,
                Variable::X => x == value,
                Variable::Y => y == value,
            }),
        }
    }

    pub fn prob_y(&self, y: usize) -> f64 {
        (0..self.nz).flat_map(|z| (0..self.nx).map(move |x| (z, x))).map(|(z, x)| self.p(z, x, y)).sum()
    }
}

/// A normalised table over `(z, x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    pub dims: [usize; 3],
    pub table: Vec<f64>,
}

impl Pmf {
    pub fn marginal(&self, v: Variable) -> Vec<f64> {
        let [nz, nx, ny] = self.dims;
        let mut out = vec![0.0; match v { Variable::Z => nz, Variable::X => nx, Variable::Y => ny }];
        for z in 0..nz {
            for x in 0..nx {
                for y in 0..ny {
                    let k = match v {
                        Variable::Z => z,
                        Variable::X => x,
                        Variable::Y => y,
                    };
                    out[k] += self.table[(z * nx + x) * ny + y];
                }
            }
        }
        out
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Both sides of the sufficiency equivalence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SufficiencyReport {
    /// `max_y TV(p(x | y), p(x | Pi y))`: zero iff `x` is independent of
    /// `y - Pi y` given `Pi y`.
    pub independence_deviation: f64,
    /// `max_y TV(p(x | y), p(x | B(Pi y)))`.
    pub sufficiency_deviation: f64,
}

impl SufficiencyReport {
    pub fn independent(&self) -> bool {
        self.independence_deviation < TOLERANCE
    }

    pub fn sufficient(&self) -> bool {
        self.sufficiency_deviation < TOLERANCE
    }

    /// The equivalence: both sides hold or both fail.
    pub fn iff_holds(&self) -> bool {
        self.independent() == self.sufficient()
    }
}

/// Equality of `E[f(x) | .]` for every `f` on a finite `X` is equality of
/// the conditional pmfs of `x`, which is what is compared here.
pub fn check_sufficiency(model: &DiscreteJointModel) -> Result<SufficiencyReport> {
    model.validate()?;
    let (mut ind, mut suf) = (0.0f64, 0.0f64);
    for y in 0..model.ny() {
        if model.prob_y(y) <= 0.0 {
            continue;
        }
        let given_y = model.conditional(Some((Variable::Y, y)))?.marginal(Variable::X);
        let s = model.project(&model.ys[y]);
        let given_s = model.condition_on(|_, _, y2| model.project(&model.ys[y2]) == s)?.marginal(Variable::X);
        let f = model.feature(y);
        let given_f = model.condition_on(|_, _, y2| model.feature(y2) == f)?.marginal(Variable::X);
        ind = ind.max(total_variation(&given_y, &given_s));
        suf = suf.max(total_variation(&given_y, &given_f));
    }
    Ok(SufficiencyReport { independence_deviation: ind, sufficiency_deviation: suf })
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorollaryOutcome {
    /// `max_y TV(p(z | y), p(z | B(Pi y)))` below tolerance.
    Holds { deviation: f64 },
    Fails { deviation: f64 },
    /// A hypothesis does not hold, so nothing is concluded.
    PreconditionFailed { which: String, deviation: f64 },
}

impl CorollaryOutcome {
    pub fn deviation(&self) -> f64 {
        match self {
            CorollaryOutcome::Holds { deviation }
            | CorollaryOutcome::Fails { deviation }
            | CorollaryOutcome::PreconditionFailed { deviation, .. } => *deviation,
        }
    }
}

/// `max_{x, y} TV(p(z | x, y), p(z | x))` over positive-probability pairs.
pub fn conditional_independence_deviation(model: &DiscreteJointModel) -> Result<f64> {
    model.validate()?;
    let mut dev = 0.0f64;
    for x in 0..model.nx {
        let Ok(given_x) = model.conditional(Some((Variable::X, x))) else { continue };
        let pz_x = given_x.marginal(Variable::Z);
        for y in 0..model.ny() {
            let Ok(given_xy) = model.condition_on(|_, x2, y2| x2 == x && y2 == y) else { continue };
            dev = dev.max(total_variation(&given_xy.marginal(Variable::Z), &pz_x));
        }
    }
    Ok(dev)
}

pub fn check_corollary(model: &DiscreteJointModel) -> Result<CorollaryOutcome> {
    let ci = conditional_independence_deviation(model)?;
    if ci >= TOLERANCE {
        return Ok(CorollaryOutcome::PreconditionFailed { which: "y and z are not conditionally independent given x".into(), deviation: ci });
    }
    let suf = check_sufficiency(model)?;
    if !suf.sufficient() {
        return Ok(CorollaryOutcome::PreconditionFailed { which: "B(Pi y) is not sufficient for x".into(), deviation: suf.sufficiency_deviation });
    }
    let mut dev = 0.0f64;
    for y in 0..model.ny() {
        if model.prob_y(y) <= 0.0 {
            continue;
        }
        let pz_y = model.conditional(Some((Variable::Y, y)))?.marginal(Variable::Z);
        let f = model.feature(y);
        let pz_f = model.condition_on(|_, _, y2| model.feature(y2) == f)?.marginal(Variable::Z);
        dev = dev.max(total_variation(&pz_y, &pz_f));
    }
    Ok(if dev < TOLERANCE { CorollaryOutcome::Holds { deviation: dev } } else { CorollaryOutcome::Fails { deviation: dev } })
}

/// How a random model couples its null-space noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseCoupling {
    /// Noise depends on `Pi y` only: both hypotheses hold.
    Independent,
    /// Noise depends on `x` as well: sufficiency fails.
    CorrelatedWithX,
    /// `y` depends on `z` directly: conditional independence fails.
    LeaksZ,
}

fn random_pmf(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    // strictly positive weights keep every event observable
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// A random model with `|X|, |Z| <= 8` and `Y` a grid `{0..a} x {0..b}` of
/// at most 8 points, `Pi` keeping the first coordinate and `B s = 2 s + 1`.
pub fn random_model(seed: u64, coupling: NoiseCoupling) -> DiscreteJointModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // the coupled variable needs two values for the coupling to exist
    let nz = rng.random_range(if coupling == NoiseCoupling::LeaksZ { 2 } else { 1 }..=8);
    let nx = rng.random_range(if coupling == NoiseCoupling::CorrelatedWithX { 2 } else { 1 }..=8);
    // a null space with at least two values whenever the noise matters
    let nb = if coupling == NoiseCoupling::Independent { rng.random_range(1..=2) } else { 2 };
    let na = rng.random_range(1..=8 / nb);
    let ys: Vec<Vec<i64>> = (0..na).flat_map(|s| (0..nb).map(move |n| vec![s as i64, n as i64])).collect();
    let ny = ys.len();
    let pz = random_pmf(nz, &mut rng);
    let px_z: Vec<Vec<f64>> = (0..nz).map(|_| random_pmf(nx, &mut rng)).collect();
    let ps_x: Vec<Vec<f64>> = (0..nx).map(|_| random_pmf(na, &mut rng)).collect();
    let pn_s: Vec<Vec<f64>> = (0..na).map(|_| random_pmf(nb, &mut rng)).collect();
    let pn_sx: Vec<Vec<Vec<f64>>> = (0..nx).map(|_| (0..na).map(|_| random_pmf(nb, &mut rng)).collect()).collect();
    let pn_sz: Vec<Vec<Vec<f64>>> = (0..nz).map(|_| (0..na).map(|_| random_pmf(nb, &mut rng)).collect()).collect();
    let mut table = vec![0.0; nz * nx * ny];
    for z in 0..nz {
        for x in 0..nx {
            for s in 0..na {
                for n in 0..nb {
                    let pn = match coupling {
                        NoiseCoupling::Independent => pn_s[s][n],
                        NoiseCoupling::CorrelatedWithX => pn_sx[x][s][n],
                        NoiseCoupling::LeaksZ => pn_sz[z][s][n],
                    };
                    table[(z * nx + x) * ny + s * nb + n] = pz[z] * px_z[z][x] * ps_x[x][s] * pn;
                }
            }
        }
    }
    DiscreteJointModel { nz, nx, ys, table, keep: vec![true, false], b_scale: vec![2, 1], b_shift: vec![1, 0] }
}

/// One line of the theory suite output.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryRow {
    pub seed: u64,
    pub coupling: NoiseCoupling,
    pub sizes: (usize, usize, usize),
    pub ci_deviation: f64,
    pub independence_deviation: f64,
    pub sufficiency_deviation: f64,
    pub corollary: CorollaryOutcome,
}

impl TheoryRow {
    /// Whether the row agrees with what its construction implies.
    pub fn consistent(&self) -> bool {
        let suff = SufficiencyReport {
            independence_deviation: self.independence_deviation,
            sufficiency_deviation: self.sufficiency_deviation,
        };
        if !suff.iff_holds() {
            return false;
        }
        match self.coupling {
            NoiseCoupling::Independent => matches!(self.corollary, CorollaryOutcome::Holds { .. }),
            NoiseCoupling::CorrelatedWithX => !suff.independent() && !suff.sufficient(),
            NoiseCoupling::LeaksZ => matches!(self.corollary, CorollaryOutcome::PreconditionFailed { .. }),
        }
    }
}

pub fn run_case(seed: u64, coupling: NoiseCoupling) -> Result<TheoryRow> {
    let m = random_model(seed, coupling);
    let suff = check_sufficiency(&m)?;
    Ok(TheoryRow {
        seed,
        coupling,
        sizes: (m.nx, m.ny(), m.nz),
        ci_deviation: conditional_independence_deviation(&m)?,
        independence_deviation: suff.independence_deviation,
        sufficiency_deviation: suff.sufficiency_deviation,
        corollary: check_corollary(&m)?,
    })
}

/// Every seed with each coupling.
/// Seeds are split across the available cores; row order follows the seeds.
pub fn run_suite(seeds: std::ops::Range<u64>) -> Result<Vec<TheoryRow>> {
    let seeds: Vec<u64> = seeds.collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = seeds.len().div_ceil(threads).max(1);
    let parts = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut rows = Vec::with_capacity(3 * part.len());
                    for &seed in part {
                        for c in [NoiseCoupling::Independent, NoiseCoupling::CorrelatedWithX, NoiseCoupling::LeaksZ] {
                            rows.push(run_case(seed, c)?);
                        }
                    }
                    Ok(rows)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("theory case panicked")).collect::<Result<Vec<Vec<TheoryRow>>>>()
    })?;
    Ok(parts.concat())
}

pub const THEORY_CSV_HEADER: &str =
    "seed,coupling,nx,ny,nz,ci_deviation,independence_deviation,sufficiency_deviation,iff_holds,corollary,corollary_deviation";

pub fn theory_csv(rows: &[TheoryRow]) -> String {
    let mut s = String::from(THEORY_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let coupling = match r.coupling {
            NoiseCoupling::Independent => "independent",
            NoiseCoupling::CorrelatedWithX => "correlated_with_x",
            NoiseCoupling::LeaksZ => "leaks_z",
        };
        let corollary = match r.corollary {
            CorollaryOutcome::Holds { .. } => "holds",
            CorollaryOutcome::Fails { .. } => "fails",
            CorollaryOutcome::PreconditionFailed { .. } => "precondition_failed",
        };
        let iff = SufficiencyReport { independence_deviation: r.independence_deviation, sufficiency_deviation: r.sufficiency_deviation }.iff_holds();
        let _ = writeln!(
            s,
            "{},{coupling},{},{},{},{},{},{},{iff},{corollary},{}",
            r.seed,
            r.sizes.0,
            r.sizes.1,
            r.sizes.2,
            fmt_sig(r.ci_deviation),
            fmt_sig(r.independence_deviation),
            fmt_sig(r.sufficiency_deviation),
            fmt_sig(r.corollary.deviation())
        );
    }
    s
}
