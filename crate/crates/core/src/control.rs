//! Constructive control of the one-point, projective and two-point chains.
//!
//! Every planner returns a [`ControlPlan`] whose achieved errors come from
//! replaying the samples through the exact maps; plans cannot be built any
//! other way. Amplitudes never exceed the bound `U` handed to the planner.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lyapunov::UnitVector3;
use crate::torus::{
    inverse_step, jacobian_inverse_step, jacobian_step, step, wrap_angle, wrap_signed, NoiseSample, TorusPoint,
};

pub const POSITION_TOL: f64 = 1e-8;
pub const ANGLE_TOL: f64 = 1e-6;
pub const ALIGN_TOL: f64 = 1e-8;
pub const ONE_POINT_TOL: f64 = 1e-10;
pub const TWO_POINT_TOL: f64 = 1e-6;
/// Pairs closer than this are treated as diagonal.
pub const DIAGONAL_TOL: f64 = 1e-9;
/// Single-shear escape steps allowed before an alignment step.
const MAX_ESCAPE: usize = 16;
/// Steps allowed while spreading a near-diagonal pair.
const MAX_SPREAD: usize = 400;
/// Below this a vector component counts as zero.
const TINY: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub name: String,
    pub len: usize,
}

/// An ordered list of samples with the errors measured by replaying it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlPlan {
    u_max: f64,
    #[serde(serialize_with = "six_tuples")]
    samples: Vec<NoiseSample>,
    segments: Vec<Segment>,
    starts: Vec<TorusPoint>,
    targets: Vec<TorusPoint>,
    reached: Vec<TorusPoint>,
    start_direction: Option<UnitVector3>,
    target_direction: Option<UnitVector3>,
    reached_direction: Option<UnitVector3>,
    position_error: Option<f64>,
    direction_error: Option<f64>,
}

fn six_tuples<S: serde::Serializer>(samples: &[NoiseSample], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(samples.iter().map(|w| w.to_array()))
}

impl ControlPlan {
    /// Replays `segments` from `starts` (and `start_direction`), measuring the
    /// distance to `targets` and the angle to `target_direction`.
    fn replay(
        u_max: f64,
        segments: Vec<(&str, Vec<NoiseSample>)>,
        starts: Vec<TorusPoint>,
        targets: Vec<TorusPoint>,
        start_direction: Option<UnitVector3>,
        target_direction: Option<UnitVector3>,
    ) -> Result<Self> {
        let mut samples = Vec::new();
        let mut seg = Vec::new();
        for (name, s) in segments {
            seg.push(Segment {
                name: name.to_string(),
                len: s.len(),
            });
            samples.extend(s);
        }
        if let Some(w) = samples.iter().find(|w| w.max_amplitude() > u_max) {
            return Err(Error::InvalidArgument(format!(
                "plan amplitude {} exceeds bound {u_max}",
                w.max_amplitude()
            )));
        }
        let mut reached = starts.clone();
        let mut dir = start_direction.map(|d| d.as_vector());
        for w in &samples {
            if let Some(v) = dir.as_mut() {
                let u = jacobian_step(reached[0], w).apply(v);
                *v = u / u.norm();
            }
            for p in reached.iter_mut() {
                *p = step(*p, w);
            }
        }
        let position_error = (!targets.is_empty()).then(|| {
            reached
                .iter()
                .zip(&targets)
                .map(|(r, t)| r.dist(t))
                .fold(0.0, f64::max)
        });
        let reached_direction = dir.map(|v| UnitVector3::from_vector(&v)).transpose()?;
        let direction_error = match (reached_direction, target_direction) {
            (Some(r), Some(t)) => Some(r.angle_to(&t)),
            _ => None,
        };
        Ok(Self {
            u_max,
            samples,
            segments: seg,
            starts,
            targets,
            reached,
            start_direction,
            target_direction,
            reached_direction,
            position_error,
            direction_error,
        })
    }

    fn require(self, position_tol: f64, angle_tol: f64) -> Result<Self> {
        let p = self.position_error.unwrap_or(0.0);
        let d = self.direction_error.unwrap_or(0.0);
        if p > position_tol || d > angle_tol || !p.is_finite() || !d.is_finite() {
            return Err(Error::ReplayTolerance {
                position: p,
                direction: d,
            });
        }
        Ok(self)
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn samples(&self) -> &[NoiseSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Samples of the named segment.
    pub fn segment(&self, name: &str) -> Option<&[NoiseSample]> {
        let mut start = 0;
        for s in &self.segments {
            if s.name == name {
                return Some(&self.samples[start..start + s.len]);
            }
            start += s.len;
        }
        None
    }

    pub fn starts(&self) -> &[TorusPoint] {
        &self.starts
    }

    pub fn targets(&self) -> &[TorusPoint] {
        &self.targets
    }

    pub fn reached(&self) -> &[TorusPoint] {
        &self.reached
    }

    pub fn reached_direction(&self) -> Option<UnitVector3> {
        self.reached_direction
    }

    pub fn target_direction(&self) -> Option<UnitVector3> {
        self.target_direction
    }

    /// Largest torus distance between a replayed endpoint and its target.
    pub fn position_error(&self) -> Option<f64> {
        self.position_error
    }

    /// Angle between the replayed direction and the target direction.
    pub fn direction_error(&self) -> Option<f64> {
        self.direction_error
    }
}

fn check_bound(u_max: f64) -> Result<()> {
    if !(u_max > 0.0 && u_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("amplitude bound must be positive, got {u_max}")));
    }
    Ok(())
}

#[inline]
fn clamp_amp(a: f64, u: f64) -> f64 {
    a.clamp(-u, u)
}

fn a_only(amp: f64, alpha: f64) -> NoiseSample {
    NoiseSample::new(amp, 0.0, 0.0, alpha, 0.0, 0.0)
}

fn b_only(amp: f64, beta: f64) -> NoiseSample {
    NoiseSample::new(0.0, amp, 0.0, 0.0, beta, 0.0)
}

fn c_only(amp: f64, gamma: f64) -> NoiseSample {
    NoiseSample::new(0.0, 0.0, amp, 0.0, 0.0, gamma)
}

/// Steps moving `x` to `x_star`: `cos(z+α) = cos(x+β) = cos(y₁+γ) = 1`, so the
/// A-, B- and C-shears translate y, z and x respectively. Displacements are
/// split over `⌈π/U⌉` steps when `U < π`.
pub fn plan_one_point(x: TorusPoint, x_star: TorusPoint, u_max: f64) -> Result<ControlPlan> {
    check_bound(u_max)?;
    let k = if u_max >= PI { 1 } else { (PI / u_max).ceil() as usize };
    let mut p = x;
    let mut samples = Vec::with_capacity(k);
    for i in 0..k {
        let left = (k - i) as f64;
        let d = p.displacement_to(&x_star);
        let (a, b, c) = (
            clamp_amp(d[1] / left, u_max),
            clamp_amp(d[2] / left, u_max),
            clamp_amp(d[0] / left, u_max),
        );
        let w = NoiseSample::new(a, b, c, wrap_angle(-p.z), wrap_angle(-p.x), wrap_angle(-(p.y + a)));
        p = step(p, &w);
        samples.push(w);
    }
    ControlPlan::replay(u_max, vec![("one-point", samples)], vec![x], vec![x_star], None, None)?
        .require(ONE_POINT_TOL, 0.0)
}

/// One step with `C = 0` and `cos(z+α) = 1` mapping direction `v` at `x` onto
/// `+e₁`, if the amplitude bound allows it.
///
/// Then `D f v = (v_x + A v_z, v_y + B cos X·c, v_z − B sin X·c)` with
/// `c = v_x + A v_z`, so `c > 0`, `B = r/c`, `(cos X, sin X) = (−v_y, v_z)/r`.
fn forward_align_step(x: TorusPoint, v: &Vector3<f64>, u: f64) -> Option<NoiseSample> {
    let r = v.y.hypot(v.z);
    let (c, a) = if v.z.abs() > TINY {
        let lo = (r / u).max(v.x - u * v.z.abs()).max(TINY);
        let hi = v.x + u * v.z.abs();
        if lo > hi {
            return None;
        }
        let c = 1f64.clamp(lo, hi);
        (c, (c - v.x) / v.z)
    } else {
        if v.x <= TINY || r > u * v.x {
            return None;
        }
        (v.x, 0.0)
    };
    let big_x = if r > 0.0 { v.z.atan2(-v.y) } else { 0.0 };
    Some(NoiseSample::new(
        clamp_amp(a, u),
        clamp_amp(r / c, u),
        0.0,
        wrap_angle(-x.z),
        wrap_angle(big_x - x.x),
        0.0,
    ))
}

/// A single-shear step that increases the first component of the direction.
fn forward_escape_step(x: TorusPoint, v: &Vector3<f64>, u: f64) -> NoiseSample {
    if v.y.abs() >= v.z.abs() && v.y.abs() > TINY {
        // C only: v_x gains −C sin Y v_y
        let big_y = -FRAC_PI_2 * v.y.signum();
        c_only(u, wrap_angle(big_y - x.y))
    } else if v.z.abs() > TINY {
        // A only: v_x gains A cos Z v_z
        let big_z = if v.z > 0.0 { 0.0 } else { PI };
        a_only(u, wrap_angle(big_z - x.z))
    } else {
        // v = ±e₁: B only turns it into the z direction
        b_only(u, wrap_angle(FRAC_PI_2 - x.x))
    }
}

/// Forward steps and the resulting point for `(x, v) ↦ (·, +e₁)`.
fn align_forward(x: TorusPoint, v: &UnitVector3, u: f64) -> Result<(Vec<NoiseSample>, TorusPoint)> {
    let mut p = x;
    let mut d = v.as_vector();
    let mut out = Vec::new();
    if UnitVector3::e1().angle_to(v) == 0.0 {
        return Ok((out, p));
    }
    for _ in 0..=MAX_ESCAPE {
        let w = match forward_align_step(p, &d, u) {
            Some(w) => {
                out.push(w);
                return Ok((out, step(p, &w)));
            }
            None => forward_escape_step(p, &d, u),
        };
        let img = jacobian_step(p, &w).apply(&d);
        d = img / img.norm();
        p = step(p, &w);
        out.push(w);
    }
    Err(Error::InvalidArgument(format!(
        "direction could not be aligned within {MAX_ESCAPE} escape steps at U = {u}"
    )))
}

/// One step with `A = 0` ending at `p` whose Jacobian carries `+e₁` at the
/// preimage onto the direction `dir` at `p`. Returns the step and the preimage.
///
/// With `A = 0`, `cos Y = 0` and `sin Y = s`:
/// `D f e₁ = (1 − s·C·B cos X, B cos X, −B sin X)`.
fn backward_align_step(p: TorusPoint, dir: &Vector3<f64>, u: f64) -> Option<(NoiseSample, TorusPoint)> {
    let r = dir.y.hypot(dir.z);
    let (t, c, s) = if dir.y.abs() > TINY {
        let lo = (r / u).max(dir.x - u * dir.y.abs()).max(TINY);
        let hi = dir.x + u * dir.y.abs();
        if lo > hi {
            return None;
        }
        let t = 1f64.clamp(lo, hi);
        let ratio = (t - dir.x) / dir.y;
        (t, ratio.abs(), if ratio < 0.0 { -1.0 } else { 1.0 })
    } else {
        if dir.x <= TINY || r > u * dir.x {
            return None;
        }
        (dir.x, 0.0, 1.0)
    };
    let (pc, qs) = (dir.y / t, -dir.z / t);
    let b = clamp_amp(pc.hypot(qs), u);
    let big_x = if b > 0.0 { qs.atan2(pc) } else { 0.0 };
    let c = clamp_amp(c, u);
    let big_y = s * FRAC_PI_2;
    let gamma = wrap_angle(big_y - p.y);
    // undo C, then B
    let q = TorusPoint::new(p.x - c * big_y.cos(), p.y, p.z - c * big_y.sin());
    let beta = wrap_angle(big_x - q.x);
    let w = NoiseSample::new(0.0, b, c, 0.0, beta, gamma);
    Some((w, inverse_step(p, &w)))
}

/// A single-shear step, viewed backwards from `p`, that increases the first
/// component of the pulled-back direction.
fn backward_escape_step(p: TorusPoint, dir: &Vector3<f64>, u: f64) -> NoiseSample {
    if dir.y.abs() >= dir.z.abs() && dir.y.abs() > TINY {
        // (D C)⁻¹: u_x gains C sin Y u_y
        let big_y = FRAC_PI_2 * dir.y.signum();
        c_only(u, wrap_angle(big_y - p.y))
    } else if dir.z.abs() > TINY {
        // (D A)⁻¹: u_x gains −A cos Z u_z
        let big_z = if dir.z > 0.0 { PI } else { 0.0 };
        a_only(u, wrap_angle(big_z - p.z))
    } else {
        b_only(u, wrap_angle(FRAC_PI_2 - p.x))
    }
}

/// Forward-ordered steps from `(x̄, +e₁)` to `(x_star, v_star)`, with `x̄`.
fn align_backward(x_star: TorusPoint, v_star: &UnitVector3, u: f64) -> Result<(Vec<NoiseSample>, TorusPoint)> {
    let mut p = x_star;
    let mut d = v_star.as_vector();
    let mut back = Vec::new();
    if UnitVector3::e1().angle_to(v_star) == 0.0 {
        return Ok((back, p));
    }
    for _ in 0..=MAX_ESCAPE {
        if let Some((w, prev)) = backward_align_step(p, &d, u) {
            back.push(w);
            back.reverse();
            return Ok((back, prev));
        }
        let w = backward_escape_step(p, &d, u);
        let img = jacobian_inverse_step(p, &w).apply(&d);
        d = img / img.norm();
        p = inverse_step(p, &w);
        back.push(w);
    }
    Err(Error::InvalidArgument(format!(
        "target direction could not be reached within {MAX_ESCAPE} escape steps at U = {u}"
    )))
}

/// Steps with `B = 0` moving `from` to `to`. The first column of both `D A` and
/// `D C` is `e₁`, so `+e₁` is carried to itself exactly.
fn rigid_projective(from: TorusPoint, to: TorusPoint, u: f64) -> Vec<NoiseSample> {
    let d = from.displacement_to(&to);
    let planar = d[0].hypot(d[2]);
    let k = ((d[1].abs() / u).ceil().max((planar / u).ceil()) as usize).max(1);
    if d.iter().all(|c| *c == 0.0) {
        return Vec::new();
    }
    let mut p = from;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let left = (k - i) as f64;
        let d = p.displacement_to(&to);
        let a = clamp_amp(d[1] / left, u);
        let c = clamp_amp(d[0].hypot(d[2]) / left, u);
        let theta = d[2].atan2(d[0]);
        // after the A-shear with cos(z+α) = 1 the y coordinate is p.y + a
        let w = NoiseSample::new(a, 0.0, c, wrap_angle(-p.z), 0.0, wrap_angle(theta - (p.y + a)));
        p = step(p, &w);
        out.push(w);
    }
    out
}

/// Steps taking direction `v` at `x` to `+e₁` (position unconstrained).
pub fn plan_projective_align(x: TorusPoint, v: UnitVector3, u_max: f64) -> Result<ControlPlan> {
    check_bound(u_max)?;
    let (samples, _) = align_forward(x, &v, u_max)?;
    ControlPlan::replay(
        u_max,
        vec![("align", samples)],
        vec![x],
        vec![],
        Some(v),
        Some(UnitVector3::e1()),
    )?
    .require(f64::INFINITY, ALIGN_TOL)
}

/// Steps taking `(x, v)` to `(x_star, v_star)`: align `v` with `+e₁`, move
/// rigidly with `B = 0` to the waypoint `x̄`, then follow the segment built
/// backwards from the target on the inverse map.
pub fn plan_projective(
    x: TorusPoint,
    v: UnitVector3,
    x_star: TorusPoint,
    v_star: UnitVector3,
    u_max: f64,
) -> Result<ControlPlan> {
    check_bound(u_max)?;
    let segments = if x == x_star && v.angle_to(&v_star) == 0.0 {
        vec![]
    } else {
        let (first, x1) = align_forward(x, &v, u_max)?;
        let (last, waypoint) = align_backward(x_star, &v_star, u_max)?;
        let middle = rigid_projective(x1, waypoint, u_max);
        vec![("align", first), ("rigid", middle), ("align-target", last)]
    };
    ControlPlan::replay(u_max, segments, vec![x], vec![x_star], Some(v), Some(v_star))?
        .require(POSITION_TOL, ANGLE_TOL)
}

/// Gap `a − b`, each component in `(−π, π]`.
fn gap(a: &TorusPoint, b: &TorusPoint) -> [f64; 3] {
    b.displacement_to(a)
}

/// The single shear on `axis` that changes the gap components it moves by
/// `change`. Axis A moves `(δx, δy)` driven by `δz`; B moves `(δy, δz)` driven
/// by `δx`; C moves `(δx, δz)` driven by `δy`. Each changes the pair's gap by
/// `2·amp·sin(δ/2)` times a unit vector set by the phase.
fn gap_shear(axis: usize, a: &TorusPoint, b: &TorusPoint, change: [f64; 2], u: f64) -> NoiseSample {
    let g = gap(a, b);
    let rho = change[0].hypot(change[1]);
    if rho == 0.0 {
        return NoiseSample::identity();
    }
    let (driver, base) = match axis {
        0 => (g[2], a.z),
        1 => (g[0], a.x),
        _ => (g[1], a.y),
    };
    let s = 2.0 * (driver / 2.0).sin();
    let sign = s.signum();
    let amp = clamp_amp(rho / s.abs(), u);
    let e = [change[0] * sign / rho, change[1] * sign / rho];
    let mid = base - driver / 2.0;
    match axis {
        // (cos m, −sin m)
        0 => a_only(amp, wrap_angle((-e[1]).atan2(e[0]) - mid)),
        1 => b_only(amp, wrap_angle((-e[1]).atan2(e[0]) - mid)),
        // (−sin m, cos m)
        _ => c_only(amp, wrap_angle((-e[0]).atan2(e[1]) - mid)),
    }
}

fn capacity(driver: f64, u: f64) -> f64 {
    2.0 * u * (driver / 2.0).sin().abs()
}

fn apply(pair: &mut (TorusPoint, TorusPoint), w: &NoiseSample, out: &mut Vec<NoiseSample>) {
    pair.0 = step(pair.0, w);
    pair.1 = step(pair.1, w);
    out.push(*w);
}

/// Forward single-shear steps bringing the pair to equal x and y coordinates
/// and z-gap `+ε`.
fn contract_pair(a: TorusPoint, b: TorusPoint, u: f64, eps: f64) -> Result<(Vec<NoiseSample>, (TorusPoint, TorusPoint))> {
    let mut pair = (a, b);
    let mut out = Vec::new();
    let g = gap(&a, &b);
    if g[0].abs() < TINY && g[1].abs() < TINY && (g[2] - eps).abs() < TINY {
        return Ok((out, pair));
    }
    // spread the y-gap to at least 1 so that C-steps have room
    let target_y = FRAC_PI_2;
    let mut guard = 0;
    loop {
        let g = gap(&pair.0, &pair.1);
        if g[1].abs() >= 1.0 {
            break;
        }
        guard += 1;
        if guard > MAX_SPREAD {
            return Err(Error::Diagonal(g.iter().map(|c| c.abs()).fold(0.0, f64::max)));
        }
        let dir = if g[1] < 0.0 { -1.0 } else { 1.0 };
        let need = target_y - g[1].abs();
        let (cap_a, cap_b, cap_c) = (capacity(g[2], u), capacity(g[0], u), capacity(g[1], u));
        let w = if cap_a.max(cap_b) < need && cap_c > cap_a.max(cap_b) {
            // grow the z-gap from the y-gap first
            let zdir = if g[2] < 0.0 { -1.0 } else { 1.0 };
            let amt = cap_c.min((FRAC_PI_2 - g[2].abs()).max(0.0));
            gap_shear(2, &pair.0, &pair.1, [0.0, zdir * amt], u)
        } else if cap_a >= cap_b {
            gap_shear(0, &pair.0, &pair.1, [0.0, dir * need.min(cap_a)], u)
        } else {
            gap_shear(1, &pair.0, &pair.1, [dir * need.min(cap_b), 0.0], u)
        };
        apply(&mut pair, &w, &mut out);
    }
    // C-steps: x-gap to 0 and z-gap to ε
    let g = gap(&pair.0, &pair.1);
    let change = [-g[0], eps - g[2]];
    let k = (change[0].hypot(change[1]) / capacity(g[1], u) * (1.0 + 1e-9)).ceil() as usize;
    for i in 0..k {
        let g = gap(&pair.0, &pair.1);
        let left = (k - i) as f64;
        let w = gap_shear(2, &pair.0, &pair.1, [-g[0] / left, (eps - g[2]) / left], u);
        apply(&mut pair, &w, &mut out);
    }
    // A-steps: y-gap to 0 at fixed z-gap ε
    let g = gap(&pair.0, &pair.1);
    let k = (g[1].abs() / capacity(eps, u) * (1.0 + 1e-9)).ceil() as usize;
    for i in 0..k {
        let g = gap(&pair.0, &pair.1);
        let left = (k - i) as f64;
        let w = gap_shear(0, &pair.0, &pair.1, [-g[0] / left, -g[1] / left], u);
        apply(&mut pair, &w, &mut out);
    }
    Ok((out, pair))
}

/// Steps with `A = 0` translating a pair that shares its x and y coordinates;
/// B and C then move both points identically.
fn rigid_pair(from: TorusPoint, to: TorusPoint, u: f64) -> Vec<NoiseSample> {
    let d = from.displacement_to(&to);
    if d.iter().all(|c| *c == 0.0) {
        return Vec::new();
    }
    let k = ((d[1].hypot(d[2]) / u).ceil().max((d[0].abs() / u).ceil()) as usize).max(1);
    let mut p = from;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let left = (k - i) as f64;
        let d = p.displacement_to(&to);
        let b = clamp_amp(d[1].hypot(d[2]) / left, u);
        let beta = wrap_angle(d[1].atan2(d[2]) - p.x);
        let c = clamp_amp(d[0] / left, u);
        let y1 = p.y + b * (p.x + beta).sin();
        let w = NoiseSample::new(0.0, b, c, 0.0, beta, wrap_angle(-y1));
        p = step(p, &w);
        out.push(w);
    }
    out
}

fn check_epsilon(eps: f64, u: f64) -> Result<()> {
    if !(eps > DIAGONAL_TOL && eps <= PI) || eps / (2.0 * (eps / 2.0).sin()) > u {
        return Err(Error::InadmissibleEpsilon(eps));
    }
    Ok(())
}

fn check_pair(a: &TorusPoint, b: &TorusPoint) -> Result<()> {
    let d = a.dist(b);
    if d < DIAGONAL_TOL {
        return Err(Error::Diagonal(d));
    }
    Ok(())
}

/// Forward contraction alone: `(x1, x2)` to a pair with equal x and y
/// coordinates and z-gap `ε`.
pub fn plan_two_point_contraction(x1: TorusPoint, x2: TorusPoint, u_max: f64, eps: f64) -> Result<ControlPlan> {
    check_bound(u_max)?;
    check_epsilon(eps, u_max)?;
    check_pair(&x1, &x2)?;
    let (s, _) = contract_pair(x1, x2, u_max, eps)?;
    ControlPlan::replay(u_max, vec![("contract", s)], vec![x1, x2], vec![], None, None)
}

/// Steps taking the pair `(x1, x2)` to `(x1_star, x2_star)`: contract to gap
/// `(0, 0, ε)`, translate rigidly with `A = 0`, then undo the contraction of
/// the targets. Single-shear steps are inverted by negating the amplitude.
pub fn plan_two_point(
    x1: TorusPoint,
    x2: TorusPoint,
    x1_star: TorusPoint,
    x2_star: TorusPoint,
    u_max: f64,
    eps: f64,
) -> Result<ControlPlan> {
    check_bound(u_max)?;
    check_epsilon(eps, u_max)?;
    check_pair(&x1, &x2)?;
    check_pair(&x1_star, &x2_star)?;
    let segments = if x1 == x1_star && x2 == x2_star {
        vec![]
    } else {
        let (forward, (p1, _)) = contract_pair(x1, x2, u_max, eps)?;
        let (backward, (q1, _)) = contract_pair(x1_star, x2_star, u_max, eps)?;
        let middle = rigid_pair(p1, q1, u_max);
        let undo: Vec<NoiseSample> = backward
            .iter()
            .rev()
            .map(|w| {
                let mut a = w.to_array();
                a[0] = -a[0];
                a[1] = -a[1];
                a[2] = -a[2];
                NoiseSample::from_array(a)
            })
            .collect();
        vec![("contract", forward), ("rigid", middle), ("expand", undo)]
    };
    ControlPlan::replay(u_max, segments, vec![x1, x2], vec![x1_star, x2_star], None, None)?
        .require(TWO_POINT_TOL, 0.0)
}

/// Largest change of the pair gap over any single step of `samples`.
pub fn max_gap_drift(x1: TorusPoint, x2: TorusPoint, samples: &[NoiseSample]) -> f64 {
    let (mut a, mut b) = (x1, x2);
    let mut worst: f64 = 0.0;
    for w in samples {
        let before = gap(&a, &b);
        a = step(a, w);
        b = step(b, w);
        let after = gap(&a, &b);
        for i in 0..3 {
            worst = worst.max(wrap_signed(after[i] - before[i]).abs());
        }
    }
    worst
}
