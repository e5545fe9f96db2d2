use super::{BoundParams, ModelParams, ParamId, Result, Tape, Var};

/// Agreement between reverse-mode and central-difference derivatives.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Entries skipped because the function has a kink there: the one-sided
    /// difference quotients disagree, as for relu at exactly 0.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.entries.is_empty() && self.max_rel_err() <= tol
    }

    /// Per-label maximum relative error, in first-seen order.
    pub fn per_label(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            let key = e.label.split('[').next().unwrap_or(&e.label).to_string();
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, m)) => *m = m.max(e.rel_err),
                None => out.push((key, e.rel_err)),
            }
        }
        out
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// reporting huge relative errors on rounding noise.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

const KINK_RATIO: f64 = 1e-2;

fn is_kink(f_plus: f64, f0: f64, f_minus: f64, h: f64) -> bool {
    let fwd = (f_plus - f0) / h;
    let bwd = (f0 - f_minus) / h;
    // smooth functions have one-sided quotients agreeing to O(h); the second
    // term bounds the rounding in the quotients themselves
    let noise = 8.0 * f64::EPSILON * f0.abs().max(f_plus.abs()).max(f_minus.abs()) / h;
    (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()) + noise
}

/// Checks a hand-differentiated function `f(x) -> (value, gradient)` at `x`
/// over the coordinates in `coords` (all coordinates when `None`).
pub fn grad_check_fn(
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    x: &[f64],
    h: f64,
    coords: Option<&[usize]>,
    floor: f64,
) -> GradCheckReport {
    let (f0, grad) = f(x);
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport::default();
    let mut xp = x.to_vec();
    for &i in coords {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp).0;
        xp[i] = orig - h;
        let fm = f(&xp).0;
        xp[i] = orig;
        if is_kink(fp, f0, fm, h) {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        report.entries.push(GradCheckEntry {
            label: format!("x[{i}]"),
            analytic: grad[i],
            numeric,
            rel_err: rel_err(grad[i], numeric, floor),
        });
    }
    report
}

/// Compares tape gradients of a scalar model function against central
/// differences for the sampled `(parameter, flat index)` entries.
///
/// `f` must rebuild the computation from scratch on the tape it is given and
/// be deterministic.
pub fn grad_check<F>(
    params: &ModelParams,
    f: F,
    sample: &[(ParamId, usize)],
    h: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams, &mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(params, &mut tape, &bound)?;
    let f0 = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let pg = bound.collect(params, &grads);

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind_frozen(&mut t);
        let l = f(p, &mut t, &b)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for &(id, idx) in sample {
        let orig = work.get(id).data()[idx];
        work.get_mut(id).data_mut()[idx] = orig + h;
        let fp = eval(&work)?;
        work.get_mut(id).data_mut()[idx] = orig - h;
        let fm = eval(&work)?;
        work.get_mut(id).data_mut()[idx] = orig;
        if is_kink(fp, f0, fm, h) {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = pg.get(id).data()[idx];
        report.entries.push(GradCheckEntry {
            label: format!("{}[{idx}]", params.name(id)),
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric, floor),
        });
    }
    Ok(report)
}
