//! The horizontal Lagrangian flow map `X` driven by the averaged flux `b`:
//! RK4 integration of `dX/dt = b(t, X)` with the Jacobian co-integrated
//! through `d(∇X)/dt = ∇b(t,X)·∇X`, cofactor inversion `Z = [∇X]⁻¹`,
//! invertibility verification, inverse maps and field pullbacks.
//!
//! `X` is stored as the displacement `X − id` so periodic wrap-around never
//! corrupts the deviation norms; the Jacobian is co-integrated rather than
//! differenced across the periodic seam.

use crate::error::{Error, Result};
use crate::grid::{
    compose_2d, compose_3d, dx_2d, dy_2d, grad_h_2d, sample_2d, GridSpec, HVectorField2D,
    ScalarField2D, ScalarField3D,
};

/// 2×2 tensor field on the torus; component `(i,j)` holds `∂X_i/∂y_j`.
#[derive(Clone, Debug)]
pub struct Jacobian2 {
    pub xx: ScalarField2D,
    pub xy: ScalarField2D,
    pub yx: ScalarField2D,
    pub yy: ScalarField2D,
}

impl Jacobian2 {
    pub fn identity(grid: GridSpec) -> Self {
        Jacobian2 {
            xx: ScalarField2D::constant(grid, 1.0),
            xy: ScalarField2D::zeros(grid),
            yx: ScalarField2D::zeros(grid),
            yy: ScalarField2D::constant(grid, 1.0),
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.xx.grid
    }

    pub fn det(&self) -> ScalarField2D {
        self.xx.mul(&self.yy).sub(&self.xy.mul(&self.yx))
    }

    /// Max-norm distance to the identity.
    pub fn deviation_linf(&self) -> f64 {
        self.xx
            .map(|v| v - 1.0)
            .linf()
            .max(self.xy.linf())
            .max(self.yx.linf())
            .max(self.yy.map(|v| v - 1.0).linf())
    }

    /// `‖self·other − I₂‖_∞` over nodes.
    pub fn product_identity_defect(&self, other: &Jacobian2) -> f64 {
        let g = self.grid();
        let mut worst = 0.0_f64;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let a = [
                    [self.xx.at(i, j), self.xy.at(i, j)],
                    [self.yx.at(i, j), self.yy.at(i, j)],
                ];
                let b = [
                    [other.xx.at(i, j), other.xy.at(i, j)],
                    [other.yx.at(i, j), other.yy.at(i, j)],
                ];
                for r in 0..2 {
                    for c in 0..2 {
                        let p = a[r][0] * b[0][c] + a[r][1] * b[1][c];
                        let target = if r == c { 1.0 } else { 0.0 };
                        worst = worst.max((p - target).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Cofactor inverse `Z = (det∇X)⁻¹ (Cof ∇X)ᵀ` per node; errors when the
/// determinant leaves the invertibility regime.
pub fn inverse_jacobian(grad: &Jacobian2) -> Result<Jacobian2> {
    let g = grad.grid();
    let det = grad.det();
    for j in 0..g.ny {
        for i in 0..g.nx {
            let d = det.at(i, j);
            if d <= crate::error::POSITIVITY_GUARD {
                return Err(Error::FlowDegenerate { det: d, i, j });
            }
        }
    }
    let inv_det = det.map(|d| 1.0 / d);
    Ok(Jacobian2 {
        xx: grad.yy.mul(&inv_det),
        xy: grad.xy.scale(-1.0).mul(&inv_det),
        yx: grad.yx.scale(-1.0).mul(&inv_det),
        yy: grad.xx.mul(&inv_det),
    })
}

/// One stored time level of the flow: displacement `X − id`, Jacobian and
/// its inverse.
#[derive(Clone, Debug)]
pub struct FlowSlice {
    pub time: f64,
    pub disp: HVectorField2D,
    pub grad: Jacobian2,
    pub z: Jacobian2,
}

impl FlowSlice {
    pub fn identity(grid: GridSpec, time: f64) -> Self {
        FlowSlice {
            time,
            disp: HVectorField2D::zeros(grid),
            grad: Jacobian2::identity(grid),
            z: Jacobian2::identity(grid),
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.disp.grid()
    }

    /// Position fields `X = id + disp`.
    pub fn positions(&self) -> (ScalarField2D, ScalarField2D) {
        let g = self.grid();
        let px = ScalarField2D::from_fn(g, |x, _| x).add(&self.disp.x);
        let py = ScalarField2D::from_fn(g, |_, y| y).add(&self.disp.y);
        (px, py)
    }
}

/// Time-indexed flow map.
#[derive(Clone, Debug)]
pub struct FlowMap {
    pub slices: Vec<FlowSlice>,
}

impl FlowMap {
    pub fn at(&self, idx: usize) -> &FlowSlice {
        &self.slices[idx]
    }

    pub fn times(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.time).collect()
    }
}

struct StageFields {
    bx: ScalarField2D,
    by: ScalarField2D,
    gxx: ScalarField2D,
    gxy: ScalarField2D,
    gyx: ScalarField2D,
    gyy: ScalarField2D,
}

fn stage_fields(b: &HVectorField2D) -> StageFields {
    StageFields {
        gxx: dx_2d(&b.x),
        gxy: dy_2d(&b.x),
        gyx: dx_2d(&b.y),
        gyy: dy_2d(&b.y),
        bx: b.x.clone(),
        by: b.y.clone(),
    }
}

#[derive(Clone, Copy, Default)]
struct NodeState {
    dx: f64,
    dy: f64,
    g: [[f64; 2]; 2],
}

#[derive(Clone, Copy, Default)]
struct NodeRate {
    dx: f64,
    dy: f64,
    g: [[f64; 2]; 2],
}

fn node_rate(sf: &StageFields, x0: f64, y0: f64, s: &NodeState) -> NodeRate {
    let px = x0 + s.dx;
    let py = y0 + s.dy;
    let b = [sample_2d(&sf.bx, px, py), sample_2d(&sf.by, px, py)];
    let gb = [
        [sample_2d(&sf.gxx, px, py), sample_2d(&sf.gxy, px, py)],
        [sample_2d(&sf.gyx, px, py), sample_2d(&sf.gyy, px, py)],
    ];
    let mut g = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            g[r][c] = gb[r][0] * s.g[0][c] + gb[r][1] * s.g[1][c];
        }
    }
    NodeRate {
        dx: b[0],
        dy: b[1],
        g,
    }
}

fn advance(s: &NodeState, k: &NodeRate, h: f64) -> NodeState {
    let mut out = *s;
    out.dx += h * k.dx;
    out.dy += h * k.dy;
    for r in 0..2 {
        for c in 0..2 {
            out.g[r][c] += h * k.g[r][c];
        }
    }
    out
}

/// Classical RK4 integration of the flow ODE from an initial slice through
/// the listed times, `substeps` RK4 steps per listed interval. `b` is
/// sampled at stage times — supply an interpolant when working from a
/// discrete series (see [`BSeries`]).
pub fn integrate_flow_from(
    b: &dyn Fn(f64) -> HVectorField2D,
    initial: FlowSlice,
    times: &[f64],
    substeps: usize,
) -> Result<FlowMap> {
    assert!(substeps >= 1);
    assert!(!times.is_empty());
    let g = initial.grid();
    let n2 = g.horizontal_len();

    let mut nodes = vec![NodeState::default(); n2];
    for j in 0..g.ny {
        for i in 0..g.nx {
            nodes[j * g.nx + i] = NodeState {
                dx: initial.disp.x.at(i, j),
                dy: initial.disp.y.at(i, j),
                g: [
                    [initial.grad.xx.at(i, j), initial.grad.xy.at(i, j)],
                    [initial.grad.yx.at(i, j), initial.grad.yy.at(i, j)],
                ],
            };
        }
    }

    let store = |nodes: &[NodeState], time: f64| -> Result<FlowSlice> {
        let mut disp = HVectorField2D::zeros(g);
        let mut grad = Jacobian2::identity(g);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let n = &nodes[j * g.nx + i];
                if !(n.dx.is_finite() && n.dy.is_finite()) {
                    return Err(Error::NonFinite { what: "flow map" });
                }
                *disp.x.at_mut(i, j) = n.dx;
                *disp.y.at_mut(i, j) = n.dy;
                *grad.xx.at_mut(i, j) = n.g[0][0];
                *grad.xy.at_mut(i, j) = n.g[0][1];
                *grad.yx.at_mut(i, j) = n.g[1][0];
                *grad.yy.at_mut(i, j) = n.g[1][1];
            }
        }
        let z = inverse_jacobian(&grad)?;
        Ok(FlowSlice {
            time,
            disp,
            grad,
            z,
        })
    };

    let mut slices = Vec::with_capacity(times.len());
    let mut t = initial.time;
    let mut output_iter = times.iter().copied().peekable();
    if (times[0] - t).abs() < 1e-14 {
        slices.push(initial.clone());
        output_iter.next();
    } else {
        assert!(times[0] > t, "first output time precedes the initial slice");
    }

    for target in output_iter {
        let span = target - t;
        let h = span / substeps as f64;
        for step in 0..substeps {
            let t0 = t + step as f64 * h;
            let f1 = stage_fields(&b(t0));
            let f2 = stage_fields(&b(t0 + 0.5 * h));
            let f4 = stage_fields(&b(t0 + h));
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let idx = j * g.nx + i;
                    let (x0, y0) = (g.x(i), g.y(j));
                    let s = nodes[idx];
                    let k1 = node_rate(&f1, x0, y0, &s);
                    let s2 = advance(&s, &k1, 0.5 * h);
                    let k2 = node_rate(&f2, x0, y0, &s2);
                    let s3 = advance(&s, &k2, 0.5 * h);
                    let k3 = node_rate(&f2, x0, y0, &s3);
                    let s4 = advance(&s, &k3, h);
                    let k4 = node_rate(&f4, x0, y0, &s4);
                    let mut out = s;
                    out.dx += h / 6.0 * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx);
                    out.dy += h / 6.0 * (k1.dy + 2.0 * k2.dy + 2.0 * k3.dy + k4.dy);
                    for r in 0..2 {
                        for c in 0..2 {
                            out.g[r][c] += h / 6.0
                                * (k1.g[r][c] + 2.0 * k2.g[r][c] + 2.0 * k3.g[r][c] + k4.g[r][c]);
                        }
                    }
                    nodes[idx] = out;
                }
            }
        }
        t = target;
        slices.push(store(&nodes, t)?);
    }
    Ok(FlowMap { slices })
}

/// Integrate the flow from the identity at `times[0]`.
pub fn integrate_flow(
    b: &dyn Fn(f64) -> HVectorField2D,
    times: &[f64],
    substeps: usize,
) -> Result<FlowMap> {
    assert!(!times.is_empty());
    let probe = b(times[0]);
    let initial = FlowSlice::identity(probe.grid(), times[0]);
    integrate_flow_from(b, initial, times, substeps)
}

/// Time-sampled `b` series with linear interpolation between samples.
pub struct BSeries {
    pub times: Vec<f64>,
    pub fields: Vec<HVectorField2D>,
}

impl BSeries {
    pub fn eval(&self, t: f64) -> HVectorField2D {
        let n = self.times.len();
        assert!(n >= 1);
        if t <= self.times[0] {
            return self.fields[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.fields[n - 1].clone();
        }
        let mut hi = 1;
        while self.times[hi] < t {
            hi += 1;
        }
        let lo = hi - 1;
        let span = self.times[hi] - self.times[lo];
        let lam = if span > 0.0 {
            (t - self.times[lo]) / span
        } else {
            0.0
        };
        self.fields[lo]
            .scale(1.0 - lam)
            .add(&self.fields[hi].scale(lam))
    }
}

/// Report of the discrete Lemma-4.1 proxies.
#[derive(Clone, Debug, serde::Serialize)]
pub struct Lemma41Report {
    /// `sup_t ‖∇X − I₂‖`: grid max of values plus first derivatives — the
    /// W^{1,∞} proxy.
    pub sup_grad_dev_w1inf: f64,
    /// `sup_t` grid max of `‖∇X − I₂‖` alone.
    pub sup_grad_dev: f64,
    pub sup_z_dev: f64,
    /// `max_t max_{j,k,l} ‖∂Z_{l,j}/∂y_k‖_∞`.
    pub max_dz_dy: f64,
    /// Max over stored slices of `‖Z·∇X − I₂‖_∞`.
    pub max_z_product_defect: f64,
    /// Whether `‖∇X − I₂‖_{W^{1,∞}} ≤ 1/2` at every stored time (the
    /// Neumann-series invertibility threshold).
    pub neumann_threshold_ok: bool,
    /// `sup_t ‖∇X − I₂‖ / (√τ·ε)` — the constant of the a-priori estimate.
    pub scaling_constant: f64,
}

pub fn verify_lemma41(flow: &FlowMap, eps: f64, tau: f64) -> Lemma41Report {
    let mut sup_grad = 0.0_f64;
    let mut sup_grad_w1 = 0.0_f64;
    let mut sup_z = 0.0_f64;
    let mut max_dz = 0.0_f64;
    let mut max_prod = 0.0_f64;
    for s in &flow.slices {
        let dev = s.grad.deviation_linf();
        sup_grad = sup_grad.max(dev);
        let mut first_diff = 0.0_f64;
        for comp in [&s.grad.xx, &s.grad.xy, &s.grad.yx, &s.grad.yy] {
            first_diff = first_diff
                .max(dx_2d(comp).linf())
                .max(dy_2d(comp).linf());
        }
        sup_grad_w1 = sup_grad_w1.max(dev + first_diff);
        sup_z = sup_z.max(s.z.deviation_linf());
        for comp in [&s.z.xx, &s.z.xy, &s.z.yx, &s.z.yy] {
            max_dz = max_dz.max(dx_2d(comp).linf()).max(dy_2d(comp).linf());
        }
        max_prod = max_prod.max(s.z.product_identity_defect(&s.grad));
    }
    Lemma41Report {
        sup_grad_dev_w1inf: sup_grad_w1,
        sup_grad_dev: sup_grad,
        sup_z_dev: sup_z,
        max_dz_dy: max_dz,
        max_z_product_defect: max_prod,
        neumann_threshold_ok: sup_grad_w1 <= 0.5,
        scaling_constant: if eps > 0.0 && tau > 0.0 {
            sup_grad / (tau.sqrt() * eps)
        } else {
            0.0
        },
    }
}

/// Inverse map `Y` of one flow slice, stored as displacement `Y − id`.
#[derive(Clone, Debug)]
pub struct InverseMap {
    pub disp: HVectorField2D,
}

/// Per-node fixed-point inversion of `X(Y) = target` to residual 1e−10;
/// the iteration contracts while `‖∇X − I₂‖ ≤ 1/2`.
pub fn inverse_map(slice: &FlowSlice) -> Result<InverseMap> {
    let g = slice.grid();
    let mut disp = HVectorField2D::zeros(g);
    let tol = 1e-10;
    let max_iters = 200;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let px = g.x(i);
            let py = g.y(j);
            let mut yx = px;
            let mut yy = py;
            let mut converged = false;
            let mut residual = f64::INFINITY;
            for _ in 0..max_iters {
                let rx = wrap_half(px - yx - sample_2d(&slice.disp.x, yx, yy));
                let ry = wrap_half(py - yy - sample_2d(&slice.disp.y, yx, yy));
                yx += rx;
                yy += ry;
                residual = rx.abs().max(ry.abs());
                if residual < tol {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::InverseMapDiverged {
                    residual,
                    iters: max_iters,
                });
            }
            *disp.x.at_mut(i, j) = yx - px;
            *disp.y.at_mut(i, j) = yy - py;
        }
    }
    Ok(InverseMap { disp })
}

#[inline]
fn wrap_half(v: f64) -> f64 {
    let mut r = v.rem_euclid(1.0);
    if r >= 0.5 {
        r -= 1.0;
    }
    r
}

/// `f ∘ X` on the grid (horizontal composition; z untouched in 3D).
pub fn pullback_2d(f: &ScalarField2D, slice: &FlowSlice) -> ScalarField2D {
    let (px, py) = slice.positions();
    compose_2d(f, &px, &py)
}

pub fn pullback_3d(f: &ScalarField3D, slice: &FlowSlice) -> ScalarField3D {
    let (px, py) = slice.positions();
    compose_3d(f, &px, &py)
}

/// `f ∘ Y` with the inverse map.
pub fn pushforward_2d(f: &ScalarField2D, inv: &InverseMap) -> ScalarField2D {
    let g = f.grid;
    let px = ScalarField2D::from_fn(g, |x, _| x).add(&inv.disp.x);
    let py = ScalarField2D::from_fn(g, |_, y| y).add(&inv.disp.y);
    compose_2d(f, &px, &py)
}

pub fn pushforward_3d(f: &ScalarField3D, inv: &InverseMap) -> ScalarField3D {
    let g = inv.disp.grid();
    let px = ScalarField2D::from_fn(g, |x, _| x).add(&inv.disp.x);
    let py = ScalarField2D::from_fn(g, |_, y| y).add(&inv.disp.y);
    compose_3d(f, &px, &py)
}

/// Flow map accumulated directly from a Lagrangian-frame `b^L` series:
/// `X(tₙ, y) = y + ∫₀^{tₙ} b^L(s, y) ds` by trapezoid in time, with the
/// Jacobian from the spectral gradient of the displacement. This is the
/// fixed-point-consistent construction the Picard solver uses — no spatial
/// interpolation enters because the label point never moves.
pub fn flow_from_lagrangian_b(times: &[f64], b_l: &[HVectorField2D]) -> Result<FlowMap> {
    assert_eq!(times.len(), b_l.len());
    assert!(!times.is_empty());
    let g = b_l[0].grid();
    let mut disp = HVectorField2D::zeros(g);
    let mut slices = Vec::with_capacity(times.len());
    let make = |disp: &HVectorField2D, time: f64| -> Result<FlowSlice> {
        let gx = grad_h_2d(&disp.x);
        let gy = grad_h_2d(&disp.y);
        let grad = Jacobian2 {
            xx: gx.x.shift(1.0),
            xy: gx.y.clone(),
            yx: gy.x.clone(),
            yy: gy.y.shift(1.0),
        };
        let z = inverse_jacobian(&grad)?;
        Ok(FlowSlice {
            time,
            disp: disp.clone(),
            grad,
            z,
        })
    };
    slices.push(make(&disp, times[0])?);
    for n in 1..times.len() {
        let h = times[n] - times[n - 1];
        disp = disp.add(&b_l[n - 1].add(&b_l[n]).scale(0.5 * h));
        slices.push(make(&disp, times[n])?);
    }
    Ok(FlowMap { slices })
}
