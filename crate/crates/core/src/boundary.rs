//! Nominal significance levels of error-spending group sequential tests.
//!
//! Boundaries are computed by the usual stagewise recursion on the density of
//! the standardised statistic given no earlier crossing, using the
//! Jennison-Turnbull grid and Simpson weights. Stage-1 levels are closed form.
//!
//! Repeated evaluation goes through a lazily filled lattice in `ln gamma` that
//! stores `ln alpha*_k` and is interpolated with monotone cubic Hermite
//! splines, so both `gamma -> alpha*` and its inverse are cheap once warm.

use crate::error::{Error, Result};
use crate::normal;
use crate::spending::SpendingFunction;
use std::sync::atomic::{AtomicBool, Ordering};
use parking_lot::Mutex;
use std::sync::OnceLock;

pub const DEFAULT_GRID_R: usize = 32;

const LAT_STEP: f64 = 0.05;
/// Nodes at `y = -(LAT_N - 1 - i) * LAT_STEP`, lowest node about `ln 1e-16`.
const LAT_N: usize = 738;

fn node_y(i: usize) -> f64 {
    -((LAT_N - 1 - i) as f64) * LAT_STEP
}

const Y_MIN: f64 = -((LAT_N - 1) as f64) * LAT_STEP;

#[derive(Debug)]
pub struct GsdBoundary {
    spending: SpendingFunction,
    fractions: Vec<f64>,
    grid_r: usize,
    nodes: Vec<Mutex<Option<Recursion>>>,
    top: OnceLock<std::result::Result<usize, Error>>,
    warned: AtomicBool,
}

/// Points on the integration grid together with weight times density.
#[derive(Debug, Clone, Default)]
struct SubDensity {
    z: Vec<f64>,
    wh: Vec<f64>,
}

impl SubDensity {
    fn mass(&self) -> f64 {
        self.wh.iter().sum()
    }
}

/// Jennison-Turnbull grid trimmed at `upper`, with midpoints and Simpson weights.
fn grid(r: usize, upper: f64) -> (Vec<f64>, Vec<f64>) {
    let rf = r as f64;
    let mut pts = Vec::with_capacity(6 * r);
    for i in 1..6 * r {
        let fi = i as f64;
        let x = if i < r {
            -3.0 - 4.0 * (rf / fi).ln()
        } else if i <= 5 * r {
            -3.0 + 3.0 * (fi - rf) / (2.0 * rf)
        } else {
            3.0 + 4.0 * (rf / (6.0 * rf - fi)).ln()
        };
        if x < upper {
            pts.push(x);
        }
    }
    if upper.is_finite() && pts.last().is_some_and(|&l| upper > l) {
        pts.push(upper);
    }
    if pts.len() < 2 {
        return (Vec::new(), Vec::new());
    }
    let n = pts.len();
    let mut z = Vec::with_capacity(2 * n - 1);
    let mut w = Vec::with_capacity(2 * n - 1);
    for i in 0..n {
        let left = if i > 0 { pts[i] - pts[i - 1] } else { 0.0 };
        let right = if i + 1 < n { pts[i + 1] - pts[i] } else { 0.0 };
        z.push(pts[i]);
        w.push((left + right) / 6.0);
        if i + 1 < n {
            z.push(0.5 * (pts[i] + pts[i + 1]));
            w.push(4.0 * right / 6.0);
        }
    }
    (z, w)
}

/// Transition from stage with fraction `t0` to `t1`.
#[derive(Clone, Copy)]
struct Step {
    s0: f64,
    s1: f64,
    sd: f64,
}

impl Step {
    fn new(t0: f64, t1: f64) -> Self {
        Step {
            s0: t0.sqrt(),
            s1: t1.sqrt(),
            sd: (t1 - t0).sqrt(),
        }
    }

    fn crossing(&self, prev: &SubDensity, c: f64) -> f64 {
        prev.z
            .iter()
            .zip(&prev.wh)
            .map(|(z, wh)| wh * normal::sf((c * self.s1 - z * self.s0) / self.sd))
            .sum()
    }

    fn crossing_with_derivative(&self, prev: &SubDensity, c: f64) -> (f64, f64) {
        let mut m = 0.0;
        let mut d = 0.0;
        for (z, wh) in prev.z.iter().zip(&prev.wh) {
            let u = (c * self.s1 - z * self.s0) / self.sd;
            m += wh * normal::sf(u);
            d -= wh * normal::pdf(u);
        }
        (m, d * self.s1 / self.sd)
    }

    fn propagate(&self, prev: &SubDensity, upper: f64, r: usize) -> SubDensity {
        // Kernel terms with |u| beyond this are below 1e-32 and skipped.
        const U_CUT: f64 = 12.0;
        let (z, w) = grid(r, upper);
        let scale = self.s1 / self.sd;
        let reach = U_CUT * self.sd / self.s0;
        let wh = z
            .iter()
            .zip(&w)
            .map(|(&x, &wx)| {
                let centre = x * self.s1 / self.s0;
                let a = prev.z.partition_point(|&zi| zi < centre - reach);
                let b = prev.z.partition_point(|&zi| zi <= centre + reach);
                let dens = gauss_sum(&prev.z[a..b], &prev.wh[a..b], x * self.s1 / self.sd, self.s0 / self.sd);
                wx * dens * normal::pdf(0.0) * scale
            })
            .collect();
        SubDensity { z, wh }
    }

    /// Boundary `c` with crossing mass `target`.
    fn solve(&self, prev: &SubDensity, target: f64) -> Result<f64> {
        let remaining = prev.mass();
        if target <= 0.0 {
            return Ok(f64::INFINITY);
        }
        if target >= remaining * (1.0 - 1e-12) {
            return Ok(f64::NEG_INFINITY);
        }
        let lt = target.ln();
        // Crossing mass never exceeds the marginal tail, so isf(target) is an upper end.
        let mut hi = normal::isf(target);
        let mut lo = hi - 1.0;
        let mut step = 1.0;
        while self.crossing(prev, lo) < target {
            hi = lo;
            step *= 2.0;
            lo -= step;
            if lo < -60.0 {
                return Ok(f64::NEG_INFINITY);
            }
        }
        let mut c = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (m, dm) = self.crossing_with_derivative(prev, c);
            let f = m.ln() - lt;
            if f > 0.0 {
                lo = c;
            } else {
                hi = c;
            }
            if f.abs() < 1e-15 || hi - lo < 1e-14 {
                return Ok(c);
            }
            let newton = c - f * m / dm;
            c = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (c - lo).abs() < 1e-15 || (hi - c).abs() < 1e-15 {
                return Ok(c);
            }
        }
        Err(Error::ConvergenceFailure {
            what: "boundary root".into(),
        })
    }
}

/// `sum_i w_i exp(-(alpha - beta z_i)^2 / 2)`. Along runs of equally spaced
/// points the exponentials follow a two-term multiplicative recurrence, which
/// is restarted from a direct evaluation every `RESTART` points so the relative
/// error stays near 1e-14.
fn gauss_sum(z: &[f64], w: &[f64], alpha: f64, beta: f64) -> f64 {
    const RESTART: usize = 32;
    let n = z.len();
    let same = |h: f64, g: f64| (h - g).abs() <= 1e-12 * h.abs();
    let mut sum = 0.0;
    let (mut g, mut q, mut r, mut step) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut run = 0usize;
    for i in 0..n {
        if run > 0 && run < RESTART && g > 1e-280 && same(z[i] - z[i - 1], step) {
            g *= q;
            q *= r;
            run += 1;
        } else {
            let u = alpha - beta * z[i];
            g = (-0.5 * u * u).exp();
            run = 0;
            if i + 3 < n {
                let h = z[i + 1] - z[i];
                if same(z[i + 2] - z[i + 1], h) && same(z[i + 3] - z[i + 2], h) {
                    let d = -beta * h;
                    step = h;
                    q = (-u * d - 0.5 * d * d).exp();
                    r = (-d * d).exp();
                    run = 1;
                }
            }
        }
        sum += w[i] * g;
    }
    sum
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::OutOfDomain {
            what: "empty information schedule".into(),
        });
    }
    let mut prev = 0.0;
    for (k, &t) in fractions.iter().enumerate() {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::OutOfDomain {
                what: format!("information fraction {t} at stage {} not in (0,1]", k + 1),
            });
        }
        if t <= prev {
            return Err(Error::SpentIncrementNonpositive { stage: k + 1 });
        }
        prev = t;
    }
    Ok(())
}

/// Boundary recursion at one level, advanced stage by stage on demand.
#[derive(Debug)]
struct Recursion {
    gamma: f64,
    levels: Vec<f64>,
    /// z-scale boundary per computed stage.
    bounds: Vec<f64>,
    dens: SubDensity,
    /// Stage whose continuation sub-density `dens` holds.
    dens_stage: usize,
    spent: f64,
}

impl Recursion {
    fn new(f: &SpendingFunction, fractions: &[f64], gamma: f64, r: usize) -> Self {
        let a0 = f.spend_unchecked(gamma, fractions[0]);
        let c0 = normal::isf(a0);
        let dens = if fractions.len() > 1 {
            let (z, w) = grid(r, c0);
            SubDensity {
                wh: z.iter().zip(&w).map(|(x, wx)| wx * normal::pdf(*x)).collect(),
                z,
            }
        } else {
            SubDensity::default()
        };
        Recursion {
            gamma,
            levels: vec![a0],
            bounds: vec![c0],
            dens,
            dens_stage: 0,
            spent: a0,
        }
    }

    fn extend_to(&mut self, f: &SpendingFunction, fractions: &[f64], r: usize, k: usize) -> Result<()> {
        while self.levels.len() <= k {
            let j = self.levels.len();
            while self.dens_stage + 1 < j {
                let s = self.dens_stage;
                let c = self.bounds[s + 1];
                self.dens = if c == f64::NEG_INFINITY {
                    SubDensity::default()
                } else {
                    Step::new(fractions[s], fractions[s + 1]).propagate(&self.dens, c, r)
                };
                self.dens_stage += 1;
            }
            let step = Step::new(fractions[j - 1], fractions[j]);
            let cum = f.spend_unchecked(self.gamma, fractions[j]);
            // Rescale by the numerically retained mass so that quadrature error in
            // the continuation region does not leak into the spent increments.
            let theory = 1.0 - self.spent;
            let inc = if theory > 0.0 {
                (cum - self.spent) * self.dens.mass() / theory
            } else {
                0.0
            };
            self.spent = cum;
            let c = step.solve(&self.dens, inc)?;
            self.levels.push(normal::sf(c));
            self.bounds.push(c);
        }
        Ok(())
    }
}

/// Nominal levels for the given spending at level `gamma`.
fn boundaries(f: &SpendingFunction, fractions: &[f64], gamma: f64, r: usize) -> Result<Vec<f64>> {
    let mut rec = Recursion::new(f, fractions, gamma, r);
    rec.extend_to(f, fractions, r, fractions.len() - 1)?;
    Ok(rec.levels)
}

/// Stagewise crossing probabilities under the null for given z-scale upper boundaries.
pub fn crossing_probabilities(fractions: &[f64], z_bounds: &[f64], grid_r: usize) -> Result<Vec<f64>> {
    check_fractions(fractions)?;
    if z_bounds.len() != fractions.len() {
        return Err(Error::DimensionMismatch {
            what: "boundaries".into(),
            expected: fractions.len(),
            found: z_bounds.len(),
        });
    }
    let mut out = vec![normal::sf(z_bounds[0])];
    let (z, w) = grid(grid_r, z_bounds[0]);
    let mut dens = SubDensity {
        wh: z.iter().zip(&w).map(|(x, wx)| wx * normal::pdf(*x)).collect(),
        z,
    };
    for k in 1..fractions.len() {
        let step = Step::new(fractions[k - 1], fractions[k]);
        out.push(step.crossing(&dens, z_bounds[k]));
        if k + 1 < fractions.len() {
            dens = step.propagate(&dens, z_bounds[k], grid_r);
        }
    }
    Ok(out)
}

impl GsdBoundary {
    pub fn new(spending: SpendingFunction, fractions: Vec<f64>) -> Result<Self> {
        Self::with_grid(spending, fractions, DEFAULT_GRID_R)
    }

    pub fn with_grid(spending: SpendingFunction, fractions: Vec<f64>, grid_r: usize) -> Result<Self> {
        spending.validate()?;
        check_fractions(&fractions)?;
        if grid_r < 4 {
            return Err(Error::OutOfDomain {
                what: format!("grid resolution {grid_r} too small"),
            });
        }
        Ok(GsdBoundary {
            spending,
            fractions,
            grid_r,
            nodes: (0..LAT_N).map(|_| Mutex::new(None)).collect(),
            top: OnceLock::new(),
            warned: AtomicBool::new(false),
        })
    }

    pub fn spending(&self) -> SpendingFunction {
        self.spending
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn stages(&self) -> usize {
        self.fractions.len()
    }

    pub fn grid_r(&self) -> usize {
        self.grid_r
    }

    /// Nominal levels for all stages at overall level `gamma`, computed directly.
    pub fn nominal_levels(&self, gamma: f64) -> Result<Vec<f64>> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::OutOfDomain {
                what: format!("gamma={gamma} not in (0,1]"),
            });
        }
        if gamma >= self.spending.proven_monotone_limit() {
            self.warn_once(gamma);
        }
        boundaries(&self.spending, &self.fractions, gamma, self.grid_r)
    }

    /// Upper boundaries on the z-scale, `isf(alpha*_k)`.
    pub fn z_boundaries(&self, gamma: f64) -> Result<Vec<f64>> {
        Ok(self.nominal_levels(gamma)?.into_iter().map(normal::isf).collect())
    }

    fn warn_once(&self, gamma: f64) {
        if !self.warned.swap(true, Ordering::Relaxed) {
            log::warn!(
                "{:?} spending used at gamma={gamma:.3}, above the range where monotone nominal levels are guaranteed",
                self.spending
            );
        }
    }

    /// `ln alpha*_k` at lattice node `i`, running the node's recursion only up to stage `k`.
    fn f(&self, i: usize, k: usize) -> Result<f64> {
        let mut node = self.nodes[i].lock();
        let rec = node.get_or_insert_with(|| Recursion::new(&self.spending, &self.fractions, node_y(i).exp(), self.grid_r));
        rec.extend_to(&self.spending, &self.fractions, self.grid_r, k)?;
        Ok(rec.levels[k].ln())
    }

    /// Index of the highest lattice node up to which nominal levels are verified monotone.
    fn top_node(&self) -> Result<usize> {
        self.top
            .get_or_init(|| {
                let limit = self.spending.proven_monotone_limit();
                if limit >= 1.0 || self.stages() == 1 {
                    return Ok(LAT_N - 1);
                }
                let start = (((limit.ln() - Y_MIN) / LAT_STEP).floor() as usize).min(LAT_N - 1);
                for i in start..LAT_N - 1 {
                    for k in 1..self.stages() {
                        if !(self.f(i + 1, k)? > self.f(i, k)?) {
                            log::warn!(
                                "nominal levels of {:?} spending are not monotone above gamma={:.4}",
                                self.spending,
                                node_y(i).exp()
                            );
                            return Ok(i);
                        }
                    }
                }
                Ok(LAT_N - 1)
            })
            .clone()
    }

    fn top_gamma(&self) -> Result<f64> {
        let t = self.top_node()?;
        Ok(if t == LAT_N - 1 { 1.0 } else { node_y(t).exp() })
    }

    fn slope(&self, i: usize, k: usize) -> Result<f64> {
        let last = LAT_N - 1;
        let d = |a: usize| -> Result<f64> { Ok((self.f(a + 1, k)? - self.f(a, k)?) / LAT_STEP) };
        if i == 0 || i == last {
            let (d0, d1) = if i == 0 { (d(0)?, d(1)?) } else { (d(last - 1)?, d(last - 2)?) };
            let mut s = (3.0 * d0 - d1) / 2.0;
            if s.signum() != d0.signum() {
                s = 0.0;
            } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
                s = 3.0 * d0;
            }
            return Ok(s);
        }
        let (a, b) = (d(i - 1)?, d(i)?);
        Ok(if a * b <= 0.0 { 0.0 } else { 2.0 * a * b / (a + b) })
    }

    /// Hermite segment `[node i, node i+1]` as (f0, f1, d0*h, d1*h), or `None`
    /// when a node value is `-inf`.
    fn segment(&self, i: usize, k: usize) -> Result<Option<[f64; 4]>> {
        let lo = i.saturating_sub(1);
        let hi = (i + 2).min(LAT_N - 1);
        for j in lo..=hi {
            if !self.f(j, k)?.is_finite() {
                return Ok(None);
            }
        }
        Ok(Some([
            self.f(i, k)?,
            self.f(i + 1, k)?,
            self.slope(i, k)? * LAT_STEP,
            self.slope(i + 1, k)? * LAT_STEP,
        ]))
    }

    fn hermite(s: &[f64; 4], t: f64) -> f64 {
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * s[0] + (t3 - 2.0 * t2 + t) * s[2] + (-2.0 * t3 + 3.0 * t2) * s[1] + (t3 - t2) * s[3]
    }

    fn hermite_dt(s: &[f64; 4], t: f64) -> f64 {
        let t2 = t * t;
        (6.0 * t2 - 6.0 * t) * s[0] + (3.0 * t2 - 4.0 * t + 1.0) * s[2] + (-6.0 * t2 + 6.0 * t) * s[1] + (3.0 * t2 - 2.0 * t) * s[3]
    }

    fn check_stage(&self, k: usize) -> Result<()> {
        if k >= self.stages() {
            return Err(Error::StageOverrun {
                stage: k + 1,
                max: self.stages(),
            });
        }
        Ok(())
    }

    /// Nominal level `alpha*_k(gamma)` (stage `k` zero-based) through the memo.
    pub fn nominal_level(&self, k: usize, gamma: f64) -> Result<f64> {
        self.check_stage(k)?;
        if gamma.is_nan() || gamma > 1.0 + 1e-12 {
            return Err(Error::OutOfDomain {
                what: format!("gamma={gamma} not in [0,1]"),
            });
        }
        if gamma <= 0.0 {
            return Ok(0.0);
        }
        let gamma = gamma.min(1.0);
        if k == 0 {
            return Ok(self.spending.spend_unchecked(gamma, self.fractions[0]));
        }
        if gamma >= self.spending.proven_monotone_limit() {
            self.warn_once(gamma);
            let top = self.top_gamma()?;
            if gamma > top * (1.0 + 1e-12) {
                return Err(Error::SpendingMonotonicityViolation { gamma: top });
            }
        }
        let y = gamma.ln();
        if y <= Y_MIN {
            let (f0, f1) = (self.f(0, k)?, self.f(1, k)?);
            if !f0.is_finite() || !f1.is_finite() {
                return Ok(0.0);
            }
            return Ok((f0 + (y - Y_MIN) * (f1 - f0) / LAT_STEP).exp());
        }
        let pos = (y - Y_MIN) / LAT_STEP;
        let i = (pos.floor() as usize).min(LAT_N - 2);
        let t = (pos - i as f64).clamp(0.0, 1.0);
        match self.segment(i, k)? {
            Some(s) => Ok(Self::hermite(&s, t).exp()),
            None => {
                let (a, b) = (self.f(i, k)?.exp(), self.f(i + 1, k)?.exp());
                Ok(a + t * (b - a))
            }
        }
    }

    /// Inverse of [`Self::nominal_level`] in gamma: the level at which the
    /// nominal level equals `p`. Returns 1 when `p >= alpha*_k(1)`.
    pub fn level_for_nominal(&self, k: usize, p: f64) -> Result<f64> {
        self.check_stage(k)?;
        if p.is_nan() {
            return Err(Error::OutOfDomain { what: "p is NaN".into() });
        }
        if p <= 0.0 {
            return Ok(0.0);
        }
        if k == 0 {
            let t = self.fractions[0];
            if p >= self.spending.spend_unchecked(1.0, t) {
                return Ok(1.0);
            }
            return Ok(self.spending.inverse_in_gamma(p, t));
        }
        let top = self.top_node()?;
        let lp = p.ln();
        let f_top = self.f(top, k)?;
        if lp >= f_top {
            return if top == LAT_N - 1 {
                Ok(1.0)
            } else {
                Err(Error::SpendingMonotonicityViolation {
                    gamma: node_y(top).exp(),
                })
            };
        }
        let f0 = self.f(0, k)?;
        if lp < f0 || !f0.is_finite() {
            let f1 = self.f(1, k)?;
            let slope = (f1 - f0) / LAT_STEP;
            if !(slope.is_finite() && slope > 0.0) {
                return Ok(0.0);
            }
            return Ok((Y_MIN + (lp - f0) / slope).exp());
        }
        // f(lo) <= lp < f(hi). Log levels are close to linear in y, so an
        // interpolated probe plus its neighbour usually settles the cell;
        // bisection steps in whenever that fails to halve the interval.
        let (mut lo, mut hi) = (0usize, top);
        let (mut flo, mut fhi) = (f0, f_top);
        while hi - lo > 1 {
            let width = hi - lo;
            let x = lo as f64 + (lp - flo) / (fhi - flo) * width as f64;
            let m = if x.is_finite() { (x.floor() as usize).clamp(lo + 1, hi - 1) } else { (lo + hi) / 2 };
            let fm = self.f(m, k)?;
            let next = if fm <= lp {
                (lo, flo) = (m, fm);
                m + 1
            } else {
                (hi, fhi) = (m, fm);
                m - 1
            };
            if next > lo && next < hi {
                let fn_ = self.f(next, k)?;
                if fn_ <= lp {
                    (lo, flo) = (next, fn_);
                } else {
                    (hi, fhi) = (next, fn_);
                }
            }
            if 2 * (hi - lo) > width && hi - lo > 1 {
                let mid = (lo + hi) / 2;
                let fm = self.f(mid, k)?;
                if fm <= lp {
                    (lo, flo) = (mid, fm);
                } else {
                    (hi, fhi) = (mid, fm);
                }
            }
        }
        let i = lo;
        let t = match self.segment(i, k)? {
            Some(s) => {
                let (mut a, mut b) = (0.0f64, 1.0f64);
                let mut t = (lp - s[0]) / (s[1] - s[0]);
                for _ in 0..100 {
                    let v = Self::hermite(&s, t) - lp;
                    if v > 0.0 {
                        b = t;
                    } else {
                        a = t;
                    }
                    if v.abs() <= 1e-15 * lp.abs().max(1.0) || b - a < 1e-15 {
                        break;
                    }
                    let d = Self::hermite_dt(&s, t);
                    let nt = t - v / d;
                    t = if nt.is_finite() && nt > a && nt < b { nt } else { 0.5 * (a + b) };
                }
                t
            }
            None => {
                let (fa, fb) = (self.f(i, k)?.exp(), self.f(i + 1, k)?.exp());
                ((p - fa) / (fb - fa)).clamp(0.0, 1.0)
            }
        };
        Ok((node_y(i) + t * LAT_STEP).exp().min(1.0))
    }

    /// Gamma above which inversion is refused, 1 when unrestricted.
    pub fn monotone_domain(&self) -> Result<f64> {
        self.top_gamma()
    }
}
