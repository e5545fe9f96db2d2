//! Physics objectives used both as the unsupervised training loss and as the
//! evaluation metrics. Every energy comes with a hand-derived gradient with
//! respect to the garment positions it is evaluated at.
//!
//! | term      | form                                                      |
//! |-----------|-----------------------------------------------------------|
//! | stretch   | `sum_e (k_s/2) (|x_i - x_j| - L)^2 / L`                   |
//! | bending   | `sum_e (k_b/2) (theta - theta_rest)^2`                    |
//! | collision | `sum_pairs k_c max(0, eps - (x_g - x_b).n_b)^3`           |
//! | gravity   | `sum_i m_i g y_i` (signed)                                |
//! | inertia   | `sum_i m_i / (2 dt^2) |x_next - (x + dt q)|^2`            |
//! | friction  | `mu sum_contacts m_i huber(|slide_tangential|) / dt`       |

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::mesh::{build_world_edges, Topology, Vec3, WorldEdgeSet};
use crate::mesh::RestState;

/// Huber threshold for the friction slide, meters.
pub const FRICTION_HUBER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub stretch: f64,
    pub bending: f64,
    pub collision: f64,
    pub gravity: f64,
    pub inertia: f64,
    pub friction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            stretch: 1.0,
            bending: 1.0,
            collision: 1e3,
            gravity: 1.0,
            inertia: 1.0,
            friction: 0.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            stretch: 0.0,
            bending: 0.0,
            collision: 0.0,
            gravity: 0.0,
            inertia: 0.0,
            friction: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    /// `k_s`
    pub stretch_stiffness: f64,
    /// `k_b`
    pub bending_stiffness: f64,
    /// `eps`, meters
    pub collision_margin: f64,
    /// `k_c`
    pub collision_stiffness: f64,
    /// m/s^2, acting along -Y
    pub gravity: f64,
    /// `mu`
    pub friction: f64,
    /// seconds
    pub dt: f64,
    /// kg/m^2
    pub density: f64,
    pub weights: LossWeights,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            stretch_stiffness: 10.0,
            bending_stiffness: 1e-3,
            collision_margin: 0.01,
            collision_stiffness: 1.0,
            gravity: 9.81,
            friction: 0.3,
            dt: 1.0 / 30.0,
            density: 0.2,
            weights: LossWeights::default(),
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<(), String> {
        let stiff = [
            ("stretch_stiffness", self.stretch_stiffness),
            ("bending_stiffness", self.bending_stiffness),
            ("collision_stiffness", self.collision_stiffness),
            ("friction", self.friction),
        ];
        for (name, v) in stiff {
            if !(v >= 0.0) {
                return Err(format!("physics.{name} must be >= 0, got {v}"));
            }
        }
        if !(self.collision_margin > 0.0) {
            return Err(format!("physics.collision_margin must be > 0, got {}", self.collision_margin));
        }
        if !(self.dt > 0.0) {
            return Err(format!("physics.dt must be > 0, got {}", self.dt));
        }
        if !(self.density > 0.0) {
            return Err(format!("physics.density must be > 0, got {}", self.density));
        }
        Ok(())
    }
}

fn grad_buffer<'a>(grad: &'a mut Option<&mut [Vec3]>) -> Option<&'a mut [Vec3]> {
    grad.as_deref_mut()
}

fn stretch_impl(pos: &[Vec3], topo: &Topology, rest: &RestState, k_s: f64, mut grad: Option<&mut [Vec3]>) -> f64 {
    let mut e = 0.0;
    for (&[i, j], &l0) in topo.edges.iter().zip(&rest.edge_rest_lengths) {
        let d = pos[i] - pos[j];
        let l = d.norm();
        let strain = l - l0;
        e += 0.5 * k_s * strain * strain / l0;
        if let Some(g) = grad_buffer(&mut grad) {
            if l > 0.0 {
                let f = d * (k_s * strain / (l0 * l));
                g[i] += f;
                g[j] -= f;
            }
        }
    }
    e
}

pub fn stretch_energy(pos: &[Vec3], topo: &Topology, rest: &RestState, k_s: f64) -> f64 {
    stretch_impl(pos, topo, rest, k_s, None)
}

pub fn stretch_energy_with_grad(pos: &[Vec3], topo: &Topology, rest: &RestState, k_s: f64) -> (f64, Vec<Vec3>) {
    let mut g = vec![Vec3::zeros(); pos.len()];
    let e = stretch_impl(pos, topo, rest, k_s, Some(&mut g));
    (e, g)
}

/// Bending energy plus the number of hinges skipped because one of their
/// triangles is degenerate in the current configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BendingResult {
    pub energy: f64,
    pub degenerate: usize,
}

/// Angle `theta` at hinge `a-b` with wings `c`, `d` and its gradient with
/// respect to `(a, b, c, d)`. Mirrors `mesh::dihedral_angle`:
/// `theta = pi - atan2(s, c)` with `n1 = u x v`, `n2 = w x u`,
/// `s = (n1 x n2).u/|u|`, `c = n1.n2`, `u = b - a`, `v = c - a`, `w = d - a`.
fn dihedral_with_grad(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> Option<(f64, [Vec3; 4])> {
    let u = b - a;
    let v = c - a;
    let w = d - a;
    let ul = u.norm();
    let n1 = u.cross(&v);
    let n2 = w.cross(&u);
    let scale = ul * ul;
    if ul == 0.0 || n1.norm() <= 1e-14 * scale || n2.norm() <= 1e-14 * scale {
        return None;
    }
    let uh = u / ul;
    let m = n1.cross(&n2);
    let s = m.dot(&uh);
    let cc = n1.dot(&n2);
    let denom = s * s + cc * cc;
    if denom == 0.0 {
        return None;
    }
    // partials of c = n1.n2
    let dc_du = v.cross(&n2) + n1.cross(&w);
    let dc_dv = n2.cross(&u);
    let dc_dw = u.cross(&n1);
    // partials of s = (n1 x n2).uh
    let p = n2.cross(&uh);
    let q = uh.cross(&n1);
    let ds_du = v.cross(&p) + q.cross(&w) + (m - uh * m.dot(&uh)) / ul;
    let ds_dv = p.cross(&u);
    let ds_dw = u.cross(&q);
    // theta = pi - atan2(s, c)  =>  dtheta = -(c ds - s dc) / (s^2 + c^2)
    let k = -1.0 / denom;
    let gu = (ds_du * cc - dc_du * s) * k;
    let gv = (ds_dv * cc - dc_dv * s) * k;
    let gw = (ds_dw * cc - dc_dw * s) * k;
    let mut theta = PI - s.atan2(cc);
    if theta >= 2.0 * PI {
        theta -= 2.0 * PI;
    }
    Some((theta, [-(gu + gv + gw), gu, gv, gw]))
}

fn bending_impl(
    pos: &[Vec3],
    topo: &Topology,
    rest: &RestState,
    k_b: f64,
    mut grad: Option<&mut [Vec3]>,
) -> BendingResult {
    let mut energy = 0.0;
    let mut degenerate = 0;
    for (h, &theta0) in topo.dihedral_pairs.iter().zip(&rest.rest_dihedral_angles) {
        let ids = [h.edge[0], h.edge[1], h.opposite[0], h.opposite[1]];
        let Some((theta, dtheta)) = dihedral_with_grad(&pos[ids[0]], &pos[ids[1]], &pos[ids[2]], &pos[ids[3]]) else {
            degenerate += 1;
            continue;
        };
        let diff = theta - theta0;
        energy += 0.5 * k_b * diff * diff;
        if let Some(g) = grad_buffer(&mut grad) {
            for (v, dv) in ids.iter().zip(dtheta.iter()) {
                g[*v] += dv * (k_b * diff);
            }
        }
    }
    BendingResult { energy, degenerate }
}

pub fn bending_energy(pos: &[Vec3], topo: &Topology, rest: &RestState, k_b: f64) -> BendingResult {
    bending_impl(pos, topo, rest, k_b, None)
}

pub fn bending_energy_with_grad(
    pos: &[Vec3],
    topo: &Topology,
    rest: &RestState,
    k_b: f64,
) -> (BendingResult, Vec<Vec3>) {
    let mut g = vec![Vec3::zeros(); pos.len()];
    let r = bending_impl(pos, topo, rest, k_b, Some(&mut g));
    (r, g)
}

fn collision_impl(
    pos_g: &[Vec3],
    pos_b: &[Vec3],
    normals_b: &[Vec3],
    edges: &WorldEdgeSet,
    margin: f64,
    k_c: f64,
    mut grad: Option<&mut [Vec3]>,
) -> f64 {
    let mut e = 0.0;
    for &(g, b) in &edges.pairs {
        let n = normals_b[b];
        let pen = margin - (pos_g[g] - pos_b[b]).dot(&n);
        if pen > 0.0 {
            e += k_c * pen * pen * pen;
            if let Some(gr) = grad_buffer(&mut grad) {
                gr[g] -= n * (3.0 * k_c * pen * pen);
            }
        }
    }
    e
}

pub fn collision_penalty(
    pos_g: &[Vec3],
    pos_b: &[Vec3],
    normals_b: &[Vec3],
    edges: &WorldEdgeSet,
    margin: f64,
    k_c: f64,
) -> f64 {
    collision_impl(pos_g, pos_b, normals_b, edges, margin, k_c, None)
}

pub fn collision_penalty_with_grad(
    pos_g: &[Vec3],
    pos_b: &[Vec3],
    normals_b: &[Vec3],
    edges: &WorldEdgeSet,
    margin: f64,
    k_c: f64,
) -> (f64, Vec<Vec3>) {
    let mut g = vec![Vec3::zeros(); pos_g.len()];
    let e = collision_impl(pos_g, pos_b, normals_b, edges, margin, k_c, Some(&mut g));
    (e, g)
}

pub fn gravity_energy(pos: &[Vec3], masses: &[f64], g: f64) -> f64 {
    pos.iter().zip(masses).map(|(p, m)| m * g * p.y).sum()
}

pub fn gravity_energy_with_grad(pos: &[Vec3], masses: &[f64], g: f64) -> (f64, Vec<Vec3>) {
    let grad = masses.iter().map(|m| Vec3::new(0.0, m * g, 0.0)).collect();
    (gravity_energy(pos, masses, g), grad)
}

fn inertia_impl(
    x_next: &[Vec3],
    x_curr: &[Vec3],
    q_curr: &[Vec3],
    masses: &[f64],
    dt: f64,
    mut grad: Option<&mut [Vec3]>,
) -> f64 {
    let inv = 1.0 / (dt * dt);
    let mut e = 0.0;
    for i in 0..x_next.len() {
        let dev = x_next[i] - (x_curr[i] + q_curr[i] * dt);
        e += 0.5 * masses[i] * inv * dev.norm_squared();
        if let Some(g) = grad_buffer(&mut grad) {
            g[i] += dev * (masses[i] * inv);
        }
    }
    e
}

pub fn inertia_term(x_next: &[Vec3], x_curr: &[Vec3], q_curr: &[Vec3], masses: &[f64], dt: f64) -> f64 {
    inertia_impl(x_next, x_curr, q_curr, masses, dt, None)
}

pub fn inertia_term_with_grad(
    x_next: &[Vec3],
    x_curr: &[Vec3],
    q_curr: &[Vec3],
    masses: &[f64],
    dt: f64,
) -> (f64, Vec<Vec3>) {
    let mut g = vec![Vec3::zeros(); x_next.len()];
    let e = inertia_impl(x_next, x_curr, q_curr, masses, dt, Some(&mut g));
    (e, g)
}

/// A garment vertex resting on a body vertex at the start of a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub garment: usize,
    /// Unit body normal at the contact, from the current configuration.
    pub normal: Vec3,
    /// Body vertex displacement over the step; the slide is measured
    /// relative to it.
    pub body_displacement: Vec3,
}

/// World-edge pairs whose normal distance is below the collision margin in
/// the current configuration.
pub fn friction_contacts(
    x_curr: &[Vec3],
    body_curr: &[Vec3],
    body_next: &[Vec3],
    normals_curr: &[Vec3],
    edges: &WorldEdgeSet,
    margin: f64,
) -> Vec<Contact> {
    edges
        .pairs
        .iter()
        .filter(|&&(g, b)| (x_curr[g] - body_curr[b]).dot(&normals_curr[b]) < margin)
        .map(|&(g, b)| Contact {
            garment: g,
            normal: normals_curr[b],
            body_displacement: body_next[b] - body_curr[b],
        })
        .collect()
}

fn huber(r: f64) -> (f64, f64) {
    if r >= FRICTION_HUBER {
        (r - 0.5 * FRICTION_HUBER, 1.0)
    } else {
        (r * r / (2.0 * FRICTION_HUBER), r / FRICTION_HUBER)
    }
}

#[allow(clippy::too_many_arguments)]
fn friction_impl(
    x_next: &[Vec3],
    x_curr: &[Vec3],
    contacts: &[Contact],
    masses: &[f64],
    mu: f64,
    dt: f64,
    mut grad: Option<&mut [Vec3]>,
) -> f64 {
    let mut e = 0.0;
    for c in contacts {
        let i = c.garment;
        let slide = x_next[i] - x_curr[i] - c.body_displacement;
        let tangential = slide - c.normal * slide.dot(&c.normal);
        let r = tangential.norm();
        let (h, dh) = huber(r);
        let k = mu * masses[i] / dt;
        e += k * h;
        if let Some(g) = grad_buffer(&mut grad) {
            if r > 0.0 {
                g[i] += tangential * (k * dh / r);
            }
        }
    }
    e
}

pub fn friction_term(
    x_next: &[Vec3],
    x_curr: &[Vec3],
    contacts: &[Contact],
    masses: &[f64],
    mu: f64,
    dt: f64,
) -> f64 {
    friction_impl(x_next, x_curr, contacts, masses, mu, dt, None)
}

pub fn friction_term_with_grad(
    x_next: &[Vec3],
    x_curr: &[Vec3],
    contacts: &[Contact],
    masses: &[f64],
    mu: f64,
    dt: f64,
) -> (f64, Vec<Vec3>) {
    let mut g = vec![Vec3::zeros(); x_next.len()];
    let e = friction_impl(x_next, x_curr, contacts, masses, mu, dt, Some(&mut g));
    (e, g)
}

/// Unweighted per-term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stretch: f64,
    pub bending: f64,
    pub inertia: f64,
    pub collision: f64,
    pub friction: f64,
    pub gravity: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 7] =
        ["Stretch", "Bending", "Inertia", "Collision", "Friction", "Gravity", "Total"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.stretch,
            self.bending,
            self.inertia,
            self.collision,
            self.friction,
            self.gravity,
            self.total,
        ]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.stretch * self.stretch
            + w.bending * self.bending
            + w.inertia * self.inertia
            + w.collision * self.collision
            + w.friction * self.friction
            + w.gravity * self.gravity
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = [0.0; 7];
        for b in items {
            for (a, v) in acc.iter_mut().zip(b.values()) {
                *a += v;
            }
        }
        LossBreakdown {
            stretch: acc[0] / n,
            bending: acc[1] / n,
            inertia: acc[2] / n,
            collision: acc[3] / n,
            friction: acc[4] / n,
            gravity: acc[5] / n,
            total: acc[6] / n,
        }
    }
}

/// Everything the per-step objective looks at besides the predicted
/// positions.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub topo: &'a Topology,
    pub rest: &'a RestState,
    pub x_curr: &'a [Vec3],
    pub q_curr: &'a [Vec3],
    pub body_next: &'a [Vec3],
    pub body_next_normals: &'a [Vec3],
    pub contacts: &'a [Contact],
    /// Radius used to rebuild world edges at the predicted positions.
    pub world_radius: f64,
}

/// Evaluates all six terms at the predicted positions `x_next`, returning the
/// breakdown, the gradient of the weighted total, and the number of
/// degenerate hinges.
pub fn total_loss(x_next: &[Vec3], ctx: &StepContext<'_>, cfg: &PhysicsConfig) -> (LossBreakdown, Vec<Vec3>, usize) {
    let w = &cfg.weights;
    let masses = &ctx.rest.vertex_masses;
    let edges = build_world_edges(x_next, ctx.body_next, ctx.world_radius).nearest(x_next, ctx.body_next);
    let (stretch, gs) = stretch_energy_with_grad(x_next, ctx.topo, ctx.rest, cfg.stretch_stiffness);
    let (bend, gb) = bending_energy_with_grad(x_next, ctx.topo, ctx.rest, cfg.bending_stiffness);
    let (inertia, gi) = inertia_term_with_grad(x_next, ctx.x_curr, ctx.q_curr, masses, cfg.dt);
    let (collision, gc) = collision_penalty_with_grad(
        x_next,
        ctx.body_next,
        ctx.body_next_normals,
        &edges,
        cfg.collision_margin,
        cfg.collision_stiffness,
    );
    let (friction, gf) = friction_term_with_grad(x_next, ctx.x_curr, ctx.contacts, masses, cfg.friction, cfg.dt);
    let (gravity, gg) = gravity_energy_with_grad(x_next, masses, cfg.gravity);
    let mut b = LossBreakdown {
        stretch,
        bending: bend.energy,
        inertia,
        collision,
        friction,
        gravity,
        total: 0.0,
    };
    b.total = b.weighted_total(w);
    let grad = (0..x_next.len())
        .map(|i| {
            gs[i] * w.stretch
                + gb[i] * w.bending
                + gi[i] * w.inertia
                + gc[i] * w.collision
                + gf[i] * w.friction
                + gg[i] * w.gravity
        })
        .collect();
    (b, grad, bend.degenerate)
}

/// Deepest penetration of any garment vertex below the tangent plane of its
/// nearest body vertex, clamped at zero.
pub fn max_penetration(pos_g: &[Vec3], pos_b: &[Vec3], normals_b: &[Vec3]) -> f64 {
    pos_g
        .iter()
        .filter_map(|p| {
            let (b, _) = pos_b
                .iter()
                .enumerate()
                .map(|(b, q)| (b, (p - q).norm_squared()))
                .min_by(|x, y| x.1.total_cmp(&y.1))?;
            Some((-(p - pos_b[b]).dot(&normals_b[b])).max(0.0))
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_topology, compute_rest_quantities, grid_cloth, parse_obj, Mesh, MeshKind};
    use crate::tensor::grad_check_fn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flatten(v: &[Vec3]) -> Vec<f64> {
        v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    fn unflatten(x: &[f64]) -> Vec<Vec3> {
        x.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
    }

    fn setup(m: &Mesh) -> (Topology, RestState) {
        let t = build_topology(m);
        let r = compute_rest_quantities(m, &t, 0.2).unwrap();
        (t, r)
    }

    fn jitter(p: &[Vec3], amp: f64, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.iter()
            .map(|v| v + Vec3::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)))
            .collect()
    }

    #[test]
    fn stretch_zero_at_rest_and_closed_form() {
        let m = grid_cloth(4, 4, 1.0, 1.0);
        let (t, r) = setup(&m);
        assert_eq!(stretch_energy(&m.vertices, &t, &r, 5.0), 0.0);

        let seg = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n", MeshKind::Garment).unwrap();
        let (mut t1, mut r1) = setup(&seg);
        t1.edges.truncate(1);
        r1.edge_rest_lengths.truncate(1);
        let p = vec![Vec3::zeros(), Vec3::new(1.5, 0.0, 0.0), Vec3::y()];
        assert!((stretch_energy(&p, &t1, &r1, 2.0) - 0.25).abs() < 1e-15);
    }

    /// Per-edge loop written independently of `stretch_impl`.
    fn stretch_oracle(p: &[Vec3], t: &Topology, r: &RestState, k: f64) -> f64 {
        let mut e = 0.0;
        for idx in 0..t.edges.len() {
            let [i, j] = t.edges[idx];
            let dx = p[i].x - p[j].x;
            let dy = p[i].y - p[j].y;
            let dz = p[i].z - p[j].z;
            let l = (dx * dx + dy * dy + dz * dz).sqrt();
            let l0 = r.edge_rest_lengths[idx];
            e += k / 2.0 * (l - l0) * (l - l0) / l0;
        }
        e
    }

    #[test]
    fn stretch_matches_oracle_and_gradient() {
        let m = grid_cloth(10, 10, 1.0, 1.0);
        let (t, r) = setup(&m);
        let p = jitter(&m.vertices, 0.02, 1);
        let e = stretch_energy(&p, &t, &r, 3.0);
        let o = stretch_oracle(&p, &t, &r, 3.0);
        assert!((e - o).abs() <= 1e-12 * o.abs());
        let rep = grad_check_fn(
            |x| {
                let (e, g) = stretch_energy_with_grad(&unflatten(x), &t, &r, 3.0);
                (e, flatten(&g))
            },
            &flatten(&p),
            1e-6,
            None,
            1e-8,
        );
        assert!(rep.max_rel_err() <= 1e-6, "{:?}", rep.worst());
    }

    fn hinge() -> (Topology, RestState, Vec<Vec3>) {
        let src = "v 0 0 0\nv 1 0 0\nv 0.5 1 0\nv 0.5 -1 0\nf 1 2 3\nf 2 1 4\n";
        let m = parse_obj(src, MeshKind::Garment).unwrap();
        let (t, r) = setup(&m);
        (t, r, m.vertices)
    }

    #[test]
    fn bending_flat_is_zero_and_right_angle_fold() {
        let (t, r, p) = hinge();
        assert_eq!(t.dihedral_pairs.len(), 1);
        assert_eq!(bending_energy(&p, &t, &r, 2.0).energy, 0.0);
        let mut folded = p.clone();
        folded[3] = Vec3::new(0.5, 0.0, 1.0);
        let e = bending_energy(&folded, &t, &r, 2.0).energy;
        assert!((e - (PI / 2.0).powi(2)).abs() < 1e-12, "{e}");
    }

    #[test]
    fn bending_gradient_on_random_folds() {
        let m = grid_cloth(6, 6, 1.0, 1.0);
        let (t, r) = setup(&m);
        for seed in 0..3 {
            let p = jitter(&m.vertices, 0.05, seed);
            let rep = grad_check_fn(
                |x| {
                    let (b, g) = bending_energy_with_grad(&unflatten(x), &t, &r, 0.7);
                    (b.energy, flatten(&g))
                },
                &flatten(&p),
                1e-5,
                None,
                1e-8,
            );
            assert!(rep.max_rel_err() <= 1e-5, "{:?}", rep.worst());
        }
    }

    #[test]
    fn degenerate_hinge_is_skipped() {
        let (t, r, mut p) = hinge();
        p[2] = Vec3::new(2.0, 0.0, 0.0);
        let b = bending_energy(&p, &t, &r, 1.0);
        assert_eq!(b.energy, 0.0);
        assert_eq!(b.degenerate, 1);
    }

    #[test]
    fn collision_boundary_and_depth() {
        let eps = 0.01;
        let body = [Vec3::zeros()];
        let normals = [Vec3::y()];
        let edges = WorldEdgeSet {
            pairs: vec![(0, 0)],
            radius: 1.0,
        };
        let at_margin = [Vec3::new(0.0, eps, 0.0)];
        assert_eq!(collision_penalty(&at_margin, &body, &normals, &edges, eps, 1.0), 0.0);
        let on_surface = [Vec3::zeros()];
        let e = collision_penalty(&on_surface, &body, &normals, &edges, eps, 1.0);
        assert!((e - eps.powi(3)).abs() < 1e-20);
    }

    #[test]
    fn gravity_and_inertia_closed_forms() {
        assert_eq!(gravity_energy(&[Vec3::zeros(); 3], &[1.0; 3], 9.81), 0.0);
        assert_eq!(gravity_energy(&[Vec3::new(0.0, -1.0, 0.0)], &[1.0], 9.81), -9.81);
        let x = [Vec3::new(1.0, 2.0, 3.0)];
        let q = [Vec3::new(0.5, 0.0, -1.0)];
        let on_path = [x[0] + q[0] * 0.1];
        assert_eq!(inertia_term(&on_path, &x, &q, &[2.0], 0.1), 0.0);
        let e = inertia_term(&[Vec3::new(1.0, 0.0, 0.0)], &[Vec3::zeros()], &[Vec3::zeros()], &[1.0], 1.0);
        assert_eq!(e, 0.5);
    }

    #[test]
    fn inertia_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut v = || Vec3::new(rng.gen(), rng.gen(), rng.gen());
        let xn: Vec<Vec3> = (0..5).map(|_| v()).collect();
        let xc: Vec<Vec3> = (0..5).map(|_| v()).collect();
        let qc: Vec<Vec3> = (0..5).map(|_| v()).collect();
        let m = [0.1, 0.2, 0.3, 0.4, 0.5];
        let dt = 0.05;
        let (_, g) = inertia_term_with_grad(&xn, &xc, &qc, &m, dt);
        for i in 0..5 {
            let expected = (xn[i] - (xc[i] + qc[i] * dt)) * (m[i] / (dt * dt));
            assert!((g[i] - expected).norm() <= 1e-12 * expected.norm());
        }
    }

    #[test]
    fn friction_cases() {
        let x = [Vec3::zeros()];
        assert_eq!(friction_term(&[Vec3::x()], &x, &[], &[1.0], 0.3, 0.1), 0.0);
        let c = [Contact {
            garment: 0,
            normal: Vec3::y(),
            body_displacement: Vec3::zeros(),
        }];
        assert_eq!(friction_term(&[Vec3::new(0.0, 0.3, 0.0)], &x, &c, &[1.0], 0.3, 0.1), 0.0);
        let e = friction_term(&[Vec3::new(0.2, 0.0, 0.0)], &x, &c, &[2.0], 0.5, 0.1);
        assert!((e - 0.5 * 2.0 * (0.2 - 0.5e-6) / 0.1).abs() < 1e-12);
    }

    fn contact_scene(seed: u64) -> (Vec<Vec3>, Vec<Vec3>, Vec<Vec3>, Vec<Vec3>, WorldEdgeSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let body: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.gen_range(-0.5..0.5), 0.0, rng.gen_range(-0.5..0.5)))
            .collect();
        let normals: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.gen_range(-0.2..0.2), 1.0, rng.gen_range(-0.2..0.2)).normalize())
            .collect();
        let garment: Vec<Vec3> = (0..20)
            .map(|_| Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.02..0.03), rng.gen_range(-0.5..0.5)))
            .collect();
        let next: Vec<Vec3> = garment
            .iter()
            .map(|p| p + Vec3::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)))
            .collect();
        let edges = build_world_edges(&garment, &body, 0.15);
        (garment, next, body, normals, edges)
    }

    #[test]
    fn collision_matches_loop_oracle_and_gradient() {
        let (_, next, body, normals, edges) = contact_scene(2);
        let eps = 0.02;
        let mut oracle = 0.0;
        for &(g, b) in &edges.pairs {
            let d = (next[g] - body[b]).dot(&normals[b]);
            if d < eps {
                oracle += 5.0 * (eps - d).powi(3);
            }
        }
        let e = collision_penalty(&next, &body, &normals, &edges, eps, 5.0);
        assert!(oracle > 0.0);
        assert!((e - oracle).abs() <= 1e-12 * oracle);
        let rep = grad_check_fn(
            |x| {
                let (e, g) = collision_penalty_with_grad(&unflatten(x), &body, &normals, &edges, eps, 5.0);
                (e, flatten(&g))
            },
            &flatten(&next),
            1e-6,
            None,
            1e-8,
        );
        assert!(rep.max_rel_err() <= 1e-6, "{:?}", rep.worst());
    }

    #[test]
    fn friction_matches_oracle_and_gradient() {
        let (curr, next, body, normals, edges) = contact_scene(3);
        let contacts = friction_contacts(&curr, &body, &body, &normals, &edges, 0.02);
        assert!(!contacts.is_empty());
        let masses = vec![0.01; curr.len()];
        let mut oracle = 0.0;
        for c in &contacts {
            let s = next[c.garment] - curr[c.garment];
            let t = s - c.normal * s.dot(&c.normal);
            oracle += 0.4 * 0.01 * (t.norm() - 0.5e-6) / 0.05;
        }
        let e = friction_term(&next, &curr, &contacts, &masses, 0.4, 0.05);
        assert!((e - oracle).abs() <= 1e-12 * oracle);
        let rep = grad_check_fn(
            |x| {
                let (e, g) = friction_term_with_grad(&unflatten(x), &curr, &contacts, &masses, 0.4, 0.05);
                (e, flatten(&g))
            },
            &flatten(&next),
            1e-5,
            None,
            1e-8,
        );
        assert!(rep.max_rel_err() <= 1e-4, "{:?}", rep.worst());
    }

    #[test]
    fn translation_invariance() {
        let m = grid_cloth(6, 6, 1.0, 1.0);
        let (t, r) = setup(&m);
        let p = jitter(&m.vertices, 0.05, 7);
        let shift = Vec3::new(0.3, -1.2, 2.5);
        let moved: Vec<Vec3> = p.iter().map(|v| v + shift).collect();
        let s0 = stretch_energy(&p, &t, &r, 2.0);
        assert!((stretch_energy(&moved, &t, &r, 2.0) - s0).abs() <= 1e-10 * s0.max(1.0));
        let b0 = bending_energy(&p, &t, &r, 2.0).energy;
        assert!((bending_energy(&moved, &t, &r, 2.0).energy - b0).abs() <= 1e-10);
        let g0 = gravity_energy(&p, &r.vertex_masses, 9.81);
        let g1 = gravity_energy(&moved, &r.vertex_masses, 9.81);
        assert!((g1 - g0 - r.total_mass() * 9.81 * shift.y).abs() <= 1e-12);
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let m = grid_cloth(5, 5, 1.0, 1.0);
        let (t, r) = setup(&m);
        let curr: Vec<Vec3> = m.vertices.iter().map(|v| v + Vec3::new(0.0, 0.005, 0.0)).collect();
        let next = jitter(&curr, 0.01, 8);
        let body: Vec<Vec3> = m.vertices.iter().map(|v| v + Vec3::new(0.01, 0.0, 0.0)).collect();
        let normals = vec![Vec3::y(); body.len()];
        let q = vec![Vec3::new(0.0, -0.1, 0.0); curr.len()];
        let edges = build_world_edges(&curr, &body, 0.1);
        let contacts = friction_contacts(&curr, &body, &body, &normals, &edges, 0.01);
        let ctx = StepContext {
            topo: &t,
            rest: &r,
            x_curr: &curr,
            q_curr: &q,
            body_next: &body,
            body_next_normals: &normals,
            contacts: &contacts,
            world_radius: 0.1,
        };
        let mut cfg = PhysicsConfig::default();
        let (b, _, _) = total_loss(&next, &ctx, &cfg);
        let manual = b.stretch + b.bending + b.inertia + 1e3 * b.collision + 0.5 * b.friction + b.gravity;
        assert!((b.total - manual).abs() <= 1e-12 * manual.abs().max(1.0));
        assert!(b.collision > 0.0 && b.friction > 0.0);

        cfg.weights = LossWeights::zero();
        assert_eq!(total_loss(&next, &ctx, &cfg).0.total, 0.0);
        cfg.weights.inertia = 1.0;
        let (b, _, _) = total_loss(&next, &ctx, &cfg);
        assert_eq!(b.total, b.inertia);
    }
}
