//! Euclidean projection onto the yaw box intersected with the rate chain.

/// Piece `f'(y) = slope·y + offset` of a derivative on `[lo, hi]`.
#[derive(Debug, Clone, Copy)]
struct Piece {
    lo: f64,
    hi: f64,
    slope: f64,
    offset: f64,
}

impl Piece {
    fn at(&self, y: f64) -> f64 {
        self.slope * y + self.offset
    }
}

/// Minimiser of a convex function given by its nondecreasing derivative.
fn argmin(d: &[Piece]) -> f64 {
    let first = d[0];
    if first.at(first.lo) >= 0.0 {
        return first.lo;
    }
    for p in d {
        if p.at(p.lo) >= 0.0 {
            // Derivative jumps across zero at a piece boundary.
            return p.lo;
        }
        if p.at(p.hi) >= 0.0 {
            return if p.slope > 0.0 {
                (-p.offset / p.slope).clamp(p.lo, p.hi)
            } else {
                p.hi
            };
        }
    }
    d[d.len() - 1].hi
}

/// Derivative of `g(y) = min_{|z − y| ≤ r} f(z)` on `[lo, hi]`.
fn widen(d: &[Piece], m: f64, r: f64, lo: f64, hi: f64) -> Vec<Piece> {
    let mut out = Vec::with_capacity(d.len() + 3);
    for p in d.iter().filter(|p| p.lo < m) {
        let b = p.hi.min(m);
        out.push(Piece {
            lo: p.lo - r,
            hi: b - r,
            slope: p.slope,
            offset: p.offset + p.slope * r,
        });
    }
    out.push(Piece {
        lo: m - r,
        hi: m + r,
        slope: 0.0,
        offset: 0.0,
    });
    for p in d.iter().filter(|p| p.hi > m) {
        let a = p.lo.max(m);
        out.push(Piece {
            lo: a + r,
            hi: p.hi + r,
            slope: p.slope,
            offset: p.offset - p.slope * r,
        });
    }
    out.into_iter()
        .filter_map(|p| {
            let (a, b) = (p.lo.max(lo), p.hi.min(hi));
            (a <= b).then_some(Piece { lo: a, hi: b, ..p })
        })
        .collect()
}

/// Projects `x` onto `{|x_n| ≤ limit, |x_n − x_{n−1}| ≤ rate}` with
/// `x_{−1} = prev` fixed. A forward pass builds the convex cost-to-come of
/// each entry as a piecewise-linear derivative; a backward pass clamps each
/// minimiser into the rate window of its successor. If `prev` lies too far
/// outside the box for any feasible chain, falls back to a sequential clamp.
pub fn project_yaw_chain(x: &mut [f64], prev: f64, limit: f64, rate: f64) {
    let n = x.len();
    if n == 0 || is_feasible(x, prev, limit, rate) {
        return;
    }
    let (mut lo, mut hi) = ((prev - rate).max(-limit), (prev + rate).min(limit));
    if lo > hi {
        clamp_chain(x, prev, limit, rate);
        return;
    }
    let mut d = vec![Piece {
        lo,
        hi,
        slope: 0.0,
        offset: 0.0,
    }];
    let mut mins = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    for k in 0..n {
        for p in d.iter_mut() {
            p.slope += 2.0;
            p.offset -= 2.0 * x[k];
        }
        let m = argmin(&d);
        mins.push(m);
        domains.push((lo, hi));
        if k + 1 < n {
            lo = (lo - rate).max(-limit);
            hi = (hi + rate).min(limit);
            d = widen(&d, m, rate, lo, hi);
        }
    }
    let mut next = mins[n - 1];
    x[n - 1] = next;
    for k in (0..n - 1).rev() {
        let (a, b) = domains[k];
        let (l, h) = ((next - rate).max(a), (next + rate).min(b));
        // The window can invert by an ulp when it touches a domain end.
        next = mins[k].clamp(l.min(h), h.max(l));
        x[k] = next;
    }
    clamp_chain(x, prev, limit, rate);
}

/// Sequential clamp: each entry is pulled into the box and into the rate
/// window of its (already clamped) predecessor.
pub(crate) fn clamp_chain(x: &mut [f64], prev: f64, limit: f64, rate: f64) {
    let mut last = prev;
    for v in x.iter_mut() {
        let lo = (last - rate).max(-limit);
        let hi = (last + rate).min(limit);
        *v = if lo <= hi {
            v.clamp(lo, hi)
        } else {
            v.clamp(-limit, limit)
        };
        last = *v;
    }
}

/// Exact feasibility up to the rounding of one subtraction.
fn is_feasible(x: &[f64], prev: f64, limit: f64, rate: f64) -> bool {
    let mut last = prev;
    for &v in x {
        let tol = 4.0 * f64::EPSILON * (v.abs() + last.abs() + rate);
        if v.abs() > limit || (v - last).abs() > rate + tol {
            return false;
        }
        last = v;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn feasible_points_are_fixed() {
        let mut x = vec![0.01, 0.05, 0.1];
        project_yaw_chain(&mut x, 0.0, 0.5, 0.06);
        assert_eq!(x, vec![0.01, 0.05, 0.1]);
    }

    #[test]
    fn jump_is_split_evenly_where_free() {
        let mut x = vec![0.0, 0.0, 0.3, 0.3];
        project_yaw_chain(&mut x, 0.0, 0.5, 0.1);
        // Least-squares optimum of the chain: a ramp with slope 0.1 centred on the jump.
        for w in x.windows(2) {
            assert!((w[1] - w[0]).abs() <= 0.1 + 1e-12);
        }
        assert!((x[0] - 0.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn result_is_feasible_and_idempotent(
            x0 in proptest::collection::vec(-1.0..1.0f64, 1..10),
            prev in -0.55..0.55f64,
        ) {
            let (limit, rate) = (std::f64::consts::FRAC_PI_6, 0.0572);
            let prev = prev.clamp(-limit, limit);
            let mut x = x0.clone();
            project_yaw_chain(&mut x, prev, limit, rate);
            let mut last = prev;
            for &v in &x {
                prop_assert!(v.abs() <= limit + 1e-15);
                prop_assert!((v - last).abs() <= rate + 1e-12);
                last = v;
            }
            let mut again = x.clone();
            project_yaw_chain(&mut again, prev, limit, rate);
            prop_assert_eq!(again, x);
        }

        #[test]
        fn projection_is_no_farther_than_clamp(
            x0 in proptest::collection::vec(-1.0..1.0f64, 1..10),
        ) {
            let (limit, rate) = (0.5, 0.06);
            let mut p = x0.clone();
            project_yaw_chain(&mut p, 0.0, limit, rate);
            let mut c = x0.clone();
            clamp_chain(&mut c, 0.0, limit, rate);
            let dist = |v: &[f64]| v.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            prop_assert!(dist(&p) <= dist(&c) + 1e-9);
        }

        #[test]
        fn projection_is_optimal(
            x0 in proptest::collection::vec(-1.0..1.0f64, 1..10),
            others in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 10), 20),
            prev in -0.5..0.5f64,
        ) {
            let (limit, rate) = (0.5, 0.06);
            let mut p = x0.clone();
            project_yaw_chain(&mut p, prev, limit, rate);
            // (x − p)·(c − p) ≤ 0 for every feasible c.
            for o in &others {
                let mut c = o[..x0.len()].to_vec();
                clamp_chain(&mut c, prev, limit, rate);
                let inner: f64 = (0..x0.len()).map(|k| (x0[k] - p[k]) * (c[k] - p[k])).sum();
                prop_assert!(inner <= 1e-12, "{inner}");
            }
        }
    }
}
