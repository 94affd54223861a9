//! Nonlinearity layer: absolute-value rectification followed by
//! sliding-window median regularization.
//!
//! The median window uses edge replication (clamped coordinates) so output
//! shape equals input shape and borders are not biased toward zero. The
//! backward pass routes each window's upstream gradient entirely to the
//! input position that supplied the median, breaking ties by the lowest
//! window scan-order slot; overlapping windows sum their contributions, so
//! total gradient mass is conserved exactly.
//!
//! The 3x3 path sorts each column of three once per row and merges sorted
//! triples with min/max/median-of-3 ops, sharing column work across the
//! three windows that touch it. The result is still an exact order
//! statistic: every returned value is one of the nine window values, bit
//! for bit.

use crate::error::{Error, Result};
use crate::map::FeatureMap;

/// Absolute-value rectification: `out(y, x) = |in(y, x)|`.
pub fn avr(input: &FeatureMap) -> FeatureMap {
    let mut out = input.clone();
    for v in out.values_mut() {
        *v = v.abs();
    }
    out
}

/// Subgradient of `avr`: `upstream * sign(input)` with `sign(0) = 0`.
pub fn avr_backward(input: &FeatureMap, upstream_grad: &FeatureMap) -> Result<FeatureMap> {
    if !input.same_shape(upstream_grad) {
        return Err(Error::Shape(format!(
            "avr_backward: {}x{} gradient does not match {}x{} input",
            upstream_grad.height(),
            upstream_grad.width(),
            input.height(),
            input.width()
        )));
    }
    let mut out = FeatureMap::zeros(input.height(), input.width());
    for ((g, &v), &u) in out
        .values_mut()
        .iter_mut()
        .zip(input.values())
        .zip(upstream_grad.values())
    {
        *g = if v > 0.0 {
            u
        } else if v < 0.0 {
            -u
        } else {
            0.0
        };
    }
    Ok(out)
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "median window must be odd and positive, got {window}"
        )));
    }
    Ok(())
}

#[inline]
fn med3(a: f64, b: f64, c: f64) -> f64 {
    a.min(b).max(a.max(b).min(c))
}

#[inline]
fn max3(a: f64, b: f64, c: f64) -> f64 {
    a.max(b).max(c)
}

#[inline]
fn min3(a: f64, b: f64, c: f64) -> f64 {
    a.min(b).min(c)
}

#[inline]
fn sort3(a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    (min3(a, b, c), med3(a, b, c), max3(a, b, c))
}

/// Median of a 3x3 window given as row-major values: sort the three
/// columns, then the median is med3(max of lows, med of mids, min of
/// highs).
#[inline]
fn median9(v: [f64; 9]) -> f64 {
    let (lo0, mid0, hi0) = sort3(v[0], v[3], v[6]);
    let (lo1, mid1, hi1) = sort3(v[1], v[4], v[7]);
    let (lo2, mid2, hi2) = sort3(v[2], v[5], v[8]);
    med3(
        max3(lo0, lo1, lo2),
        med3(mid0, mid1, mid2),
        min3(hi0, hi1, hi2),
    )
}

#[inline]
fn clamp_coord(pos: usize, offset: usize, radius: usize, limit: usize) -> usize {
    (pos + offset).saturating_sub(radius).min(limit - 1)
}

struct Sorted3Rows {
    lo: Vec<f64>,
    mid: Vec<f64>,
    hi: Vec<f64>,
}

impl Sorted3Rows {
    fn new(width: usize) -> Self {
        Sorted3Rows {
            lo: vec![0.0; width],
            mid: vec![0.0; width],
            hi: vec![0.0; width],
        }
    }

    fn fill(&mut self, up: &[f64], center: &[f64], down: &[f64]) {
        for (((lo, mid), hi), ((&u, &c), &d)) in self
            .lo
            .iter_mut()
            .zip(self.mid.iter_mut())
            .zip(self.hi.iter_mut())
            .zip(up.iter().zip(center).zip(down))
        {
            let (l, m, h) = sort3(u, c, d);
            *lo = l;
            *mid = m;
            *hi = h;
        }
    }

    #[inline]
    fn median_at(&self, xl: usize, x: usize, xr: usize) -> f64 {
        med3(
            max3(self.lo[xl], self.lo[x], self.lo[xr]),
            med3(self.mid[xl], self.mid[x], self.mid[xr]),
            min3(self.hi[xl], self.hi[x], self.hi[xr]),
        )
    }

    /// Merge for every output column of one row: interior columns slide
    /// three-wide windows directly; the edge columns replicate.
    fn merge_row(&self, out_row: &mut [f64]) {
        let w = out_row.len();
        if w == 1 {
            out_row[0] = self.mid[0];
            return;
        }
        out_row[0] = self.median_at(0, 0, 1);
        out_row[w - 1] = self.median_at(w - 2, w - 1, w - 1);
        let inner = &mut out_row[1..w - 1];
        for (x, o) in inner.iter_mut().enumerate() {
            *o = med3(
                max3(self.lo[x], self.lo[x + 1], self.lo[x + 2]),
                med3(self.mid[x], self.mid[x + 1], self.mid[x + 2]),
                min3(self.hi[x], self.hi[x + 1], self.hi[x + 2]),
            );
        }
    }
}

fn smr3(input: &FeatureMap) -> FeatureMap {
    let (h, w) = (input.height(), input.width());
    let src = input.values();
    let mut out = FeatureMap::zeros(h, w);
    let dst = out.values_mut();
    let mut cols = Sorted3Rows::new(w);

    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        cols.fill(
            &src[ym * w..(ym + 1) * w],
            &src[y * w..(y + 1) * w],
            &src[yp * w..(yp + 1) * w],
        );
        cols.merge_row(&mut dst[y * w..(y + 1) * w]);
    }
    out
}

fn smr3_sources(input: &FeatureMap, sources: &mut [u32]) -> FeatureMap {
    let (h, w) = (input.height(), input.width());
    let src = input.values();
    let mut out = FeatureMap::zeros(h, w);
    let dst = out.values_mut();
    let mut cols = Sorted3Rows::new(w);

    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        let row_up = &src[ym * w..(ym + 1) * w];
        let row_mid = &src[y * w..(y + 1) * w];
        let row_down = &src[yp * w..(yp + 1) * w];
        cols.fill(row_up, row_mid, row_down);
        let out_row = &mut dst[y * w..(y + 1) * w];
        cols.merge_row(out_row);
        // second pass: first window slot (scan order) holding each median
        let src_row = &mut sources[y * w..(y + 1) * w];
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let median = out_row[x];
            let found = if row_up[xl] == median {
                ym * w + xl
            } else if row_up[x] == median {
                ym * w + x
            } else if row_up[xr] == median {
                ym * w + xr
            } else if row_mid[xl] == median {
                y * w + xl
            } else if row_mid[x] == median {
                y * w + x
            } else if row_mid[xr] == median {
                y * w + xr
            } else if row_down[xl] == median {
                yp * w + xl
            } else if row_down[x] == median {
                yp * w + x
            } else {
                yp * w + xr
            };
            debug_assert_eq!(src[found], median);
            src_row[x] = found as u32;
        }
    }
    out
}

fn smr_general(input: &FeatureMap, window: usize, mut sources: Option<&mut [u32]>) -> FeatureMap {
    let (h, w) = (input.height(), input.width());
    let r = window / 2;
    let taps = window * window;
    let mid = taps / 2;
    let src = input.values();
    let mut out = FeatureMap::zeros(h, w);
    let dst = out.values_mut();

    let mut vals = vec![0.0f64; taps];
    let mut idxs = vec![0u32; taps];
    let mut scratch = vec![0.0f64; taps];
    for y in 0..h {
        for x in 0..w {
            for wy in 0..window {
                let sy = clamp_coord(y, wy, r, h);
                for wx in 0..window {
                    let sx = clamp_coord(x, wx, r, w);
                    let slot = wy * window + wx;
                    vals[slot] = src[sy * w + sx];
                    idxs[slot] = (sy * w + sx) as u32;
                }
            }
            scratch.copy_from_slice(&vals);
            let (_, median, _) = scratch.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            let median = *median;
            dst[y * w + x] = median;
            if let Some(sources) = sources.as_deref_mut() {
                let slot = vals
                    .iter()
                    .position(|&v| v == median)
                    .expect("median value present in its own window");
                sources[y * w + x] = idxs[slot];
            }
        }
    }
    out
}

/// Sliding-window median regularization with edge replication.
pub fn smr(input: &FeatureMap, window: usize) -> Result<FeatureMap> {
    check_window(window)?;
    if window == 1 {
        return Ok(input.clone());
    }
    if window == 3 {
        Ok(smr3(input))
    } else {
        Ok(smr_general(input, window, None))
    }
}

/// Median map plus, per output position, the input linear index that
/// supplied the median (ties broken by lowest window scan-order slot).
pub(crate) fn smr_with_sources(input: &FeatureMap, window: usize) -> Result<(FeatureMap, Vec<u32>)> {
    check_window(window)?;
    let mut sources = vec![0u32; input.len()];
    if window == 1 {
        for (i, s) in sources.iter_mut().enumerate() {
            *s = i as u32;
        }
        return Ok((input.clone(), sources));
    }
    let out = if window == 3 {
        smr3_sources(input, &mut sources)
    } else {
        smr_general(input, window, Some(&mut sources))
    };
    Ok((out, sources))
}

/// For every output position, the input linear index that supplies its
/// median.
pub(crate) fn smr_select_sources(input: &FeatureMap, window: usize) -> Result<Vec<u32>> {
    Ok(smr_with_sources(input, window)?.1)
}

/// Accumulates each output's upstream gradient onto its selected source.
pub(crate) fn scatter_by_sources(
    sources: &[u32],
    upstream_grad: &FeatureMap,
) -> FeatureMap {
    let mut grad = FeatureMap::zeros(upstream_grad.height(), upstream_grad.width());
    let g = grad.values_mut();
    for (&src_idx, &u) in sources.iter().zip(upstream_grad.values()) {
        g[src_idx as usize] += u;
    }
    grad
}

/// Subgradient of `smr`: each output routes its upstream gradient to the
/// input position selected as the median.
pub fn smr_backward(
    input: &FeatureMap,
    upstream_grad: &FeatureMap,
    window: usize,
) -> Result<FeatureMap> {
    if !input.same_shape(upstream_grad) {
        return Err(Error::Shape(format!(
            "smr_backward: {}x{} gradient does not match {}x{} input",
            upstream_grad.height(),
            upstream_grad.width(),
            input.height(),
            input.width()
        )));
    }
    let sources = smr_select_sources(input, window)?;
    Ok(scatter_by_sources(&sources, upstream_grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{child_rng, unit_f64};
    use crate::test_support::random_map;

    #[test]
    fn median9_matches_sort_on_all_permutations() {
        // Exhaustive over the 9! orderings of distinct values.
        fn permute(vals: &mut [f64; 9], k: usize, check: &mut impl FnMut(&[f64; 9])) {
            if k == 1 {
                check(vals);
                return;
            }
            for i in 0..k {
                permute(vals, k - 1, check);
                if k % 2 == 0 {
                    vals.swap(i, k - 1);
                } else {
                    vals.swap(0, k - 1);
                }
            }
        }
        let mut vals = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let mut count = 0usize;
        permute(&mut vals, 9, &mut |v| {
            assert_eq!(median9(*v), 4.0);
            count += 1;
        });
        assert_eq!(count, 362_880);
    }

    #[test]
    fn median9_matches_sort_with_duplicates() {
        // All 3^9 windows over a 3-value alphabet.
        for code in 0..19_683usize {
            let mut v = [0.0f64; 9];
            let mut c = code;
            for slot in &mut v {
                *slot = (c % 3) as f64;
                c /= 3;
            }
            let mut sorted = v;
            sorted.sort_by(|a, b| a.total_cmp(b));
            assert_eq!(median9(v), sorted[4]);
        }
    }

    #[test]
    fn avr_examples() {
        let m = FeatureMap::new(1, 3, vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(avr(&m).values(), &[2.0, 0.0, 3.0]);
        let nonneg = FeatureMap::new(2, 2, vec![0.0, 1.0, 2.5, 0.25]).unwrap();
        assert_eq!(avr(&nonneg), nonneg);
    }

    #[test]
    fn avr_is_idempotent_and_nonnegative() {
        let mut rng = child_rng(20, 0, 0);
        for _ in 0..20 {
            let m = random_map(&mut rng, 6, 5);
            let once = avr(&m);
            assert!(once.values().iter().all(|&v| v >= 0.0));
            assert_eq!(avr(&once), once);
        }
    }

    #[test]
    fn smr_of_constant_map_is_constant() {
        let m = FeatureMap::new(4, 4, vec![2.5; 16]).unwrap();
        assert_eq!(smr(&m, 3).unwrap(), m);
    }

    #[test]
    fn smr_removes_center_impulse() {
        let mut m = FeatureMap::zeros(3, 3);
        m.set(1, 1, 1.0);
        let out = smr(&m, 3).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smr_on_ramp_map() {
        let m = FeatureMap::new(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let out = smr(&m, 3).unwrap();
        // center window is exactly 1..9
        assert_eq!(out.get(1, 1), 5.0);
        // corner window replicates edges: values {1,1,2,1,1,2,4,4,5}
        assert_eq!(out.get(0, 0), 2.0);
    }

    #[test]
    fn smr_rejects_even_window() {
        let m = FeatureMap::zeros(4, 4);
        assert!(matches!(smr(&m, 2), Err(Error::Config(_))));
        assert!(matches!(smr(&m, 0), Err(Error::Config(_))));
    }

    #[test]
    fn smr_window_one_is_identity() {
        let mut rng = child_rng(21, 0, 0);
        let m = random_map(&mut rng, 5, 7);
        assert_eq!(smr(&m, 1).unwrap(), m);
    }

    #[test]
    fn smr_handles_degenerate_shapes() {
        let mut rng = child_rng(27, 0, 0);
        for (h, w) in [(1, 1), (1, 8), (8, 1), (2, 2)] {
            let m = random_map(&mut rng, h, w);
            let fast = smr(&m, 3).unwrap();
            let slow = crate::verify::sort_median_reference(&m, 3).unwrap();
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn smr_five_window_matches_reference() {
        let mut rng = child_rng(28, 0, 0);
        for _ in 0..5 {
            let m = random_map(&mut rng, 9, 7);
            let fast = smr(&m, 5).unwrap();
            let slow = crate::verify::sort_median_reference(&m, 5).unwrap();
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn smr_output_within_window_range() {
        let mut rng = child_rng(22, 0, 0);
        for _ in 0..10 {
            let m = random_map(&mut rng, 8, 6);
            let out = smr(&m, 3).unwrap();
            for y in 0..8 {
                for x in 0..6 {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for wy in 0..3 {
                        for wx in 0..3 {
                            let v = m.get(
                                clamp_coord(y, wy, 1, 8),
                                clamp_coord(x, wx, 1, 6),
                            );
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let o = out.get(y, x);
                    assert!(o >= lo && o <= hi);
                }
            }
        }
    }

    #[test]
    fn pipeline_is_sign_invariant() {
        let mut rng = child_rng(23, 0, 0);
        for _ in 0..10 {
            let y = random_map(&mut rng, 6, 6);
            let neg = FeatureMap::new(6, 6, y.values().iter().map(|v| -v).collect()).unwrap();
            let a = smr(&avr(&y), 3).unwrap();
            let b = smr(&avr(&neg), 3).unwrap();
            assert_eq!(a, b);
            assert!(a.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn avr_backward_examples() {
        let pos = FeatureMap::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let neg = FeatureMap::new(1, 3, vec![-1.0, -2.0, -3.0]).unwrap();
        let up = FeatureMap::new(1, 3, vec![0.5, -0.5, 2.0]).unwrap();
        assert_eq!(avr_backward(&pos, &up).unwrap(), up);
        assert_eq!(
            avr_backward(&neg, &up).unwrap().values(),
            &[-0.5, 0.5, -2.0]
        );
        let zero = FeatureMap::new(1, 1, vec![0.0]).unwrap();
        let u1 = FeatureMap::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(avr_backward(&zero, &u1).unwrap().values(), &[0.0]);
        let bad = FeatureMap::zeros(2, 2);
        assert!(matches!(
            avr_backward(&pos, &bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn avr_backward_matches_finite_differences() {
        let mut rng = child_rng(24, 0, 0);
        // keep values away from zero so |.| is differentiable
        let vals: Vec<f64> = (0..30)
            .map(|_| {
                let v = unit_f64(&mut rng) * 2.0 - 1.0;
                if v >= 0.0 {
                    v + 0.1
                } else {
                    v - 0.1
                }
            })
            .collect();
        let x = FeatureMap::new(5, 6, vals).unwrap();
        let g = random_map(&mut rng, 5, 6);
        let grad = avr_backward(&x, &g).unwrap();
        let step = 1e-6;
        let objective = |m: &FeatureMap| -> f64 {
            avr(m)
                .values()
                .iter()
                .zip(g.values())
                .map(|(a, b)| a * b)
                .sum()
        };
        for i in 0..x.len() {
            let mut plus = x.values().to_vec();
            let mut minus = plus.clone();
            plus[i] += step;
            minus[i] -= step;
            let fd = (objective(&FeatureMap::new(5, 6, plus).unwrap())
                - objective(&FeatureMap::new(5, 6, minus).unwrap()))
                / (2.0 * step);
            let denom = fd.abs().max(grad.values()[i].abs()).max(1e-6);
            assert!((fd - grad.values()[i]).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn smr_backward_constant_map_routes_by_tie_break() {
        // Every window of a constant map ties everywhere, so each output
        // routes to its window's lowest scan-order slot: the clamped
        // top-left corner. On a 2x2 map that is always position (0, 0).
        let m = FeatureMap::new(2, 2, vec![5.0; 4]).unwrap();
        let up = FeatureMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grad = smr_backward(&m, &up, 3).unwrap();
        assert_eq!(grad.values(), &[10.0, 0.0, 0.0, 0.0]);
        // mass conservation
        let total: f64 = grad.values().iter().sum();
        let up_total: f64 = up.values().iter().sum();
        assert_eq!(total, up_total);
    }

    #[test]
    fn smr_backward_routes_to_median_of_distinct_window() {
        // 4x4 strictly increasing map; a single unit of upstream gradient at
        // interior position (1, 1) lands exactly on the median of its
        // window, which is value 6 at (1, 1).
        let m = FeatureMap::new(4, 4, (1..=16).map(f64::from).collect()).unwrap();
        let mut up = FeatureMap::zeros(4, 4);
        up.set(1, 1, 1.0);
        let grad = smr_backward(&m, &up, 3).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = if (y, x) == (1, 1) { 1.0 } else { 0.0 };
                assert_eq!(grad.get(y, x), expect);
            }
        }
    }

    #[test]
    fn smr_backward_conserves_gradient_mass() {
        let mut rng = child_rng(25, 0, 0);
        for _ in 0..20 {
            let m = random_map(&mut rng, 7, 5);
            let up = random_map(&mut rng, 7, 5);
            let grad = smr_backward(&m, &up, 3).unwrap();
            let total: f64 = grad.values().iter().sum();
            let up_total: f64 = up.values().iter().sum();
            assert!((total - up_total).abs() <= 1e-12 * up_total.abs().max(1.0));
        }
    }

    #[test]
    fn smr_sources_agree_between_fast_and_general_paths() {
        let mut rng = child_rng(29, 0, 0);
        for _ in 0..10 {
            let m = random_map(&mut rng, 6, 9);
            let fast = smr_with_sources(&m, 3).unwrap();
            let general = {
                let mut sources = vec![0u32; m.len()];
                let out = smr_general(&m, 3, Some(&mut sources));
                (out, sources)
            };
            assert_eq!(fast.0, general.0);
            assert_eq!(fast.1, general.1);
        }
        // maps with heavy ties exercise the tie-break rule
        let tied = FeatureMap::new(4, 4, vec![1.0; 16]).unwrap();
        let fast = smr_with_sources(&tied, 3).unwrap();
        let mut sources = vec![0u32; 16];
        let out = smr_general(&tied, 3, Some(&mut sources));
        assert_eq!(fast.0, out);
        assert_eq!(fast.1, sources);
    }

    #[test]
    fn smr_backward_matches_finite_differences_at_stable_points() {
        let mut rng = child_rng(26, 0, 0);
        let x = random_map(&mut rng, 5, 5);
        let g = random_map(&mut rng, 5, 5);
        let grad = smr_backward(&x, &g, 3).unwrap();
        let step = 1e-7;
        let objective = |m: &FeatureMap| -> f64 {
            smr(m, 3)
                .unwrap()
                .values()
                .iter()
                .zip(g.values())
                .map(|(a, b)| a * b)
                .sum()
        };
        let base_sources = smr_select_sources(&x, 3).unwrap();
        let mut checked = 0;
        for i in 0..x.len() {
            let mut plus = x.values().to_vec();
            let mut minus = plus.clone();
            plus[i] += step;
            minus[i] -= step;
            let xp = FeatureMap::new(5, 5, plus).unwrap();
            let xm = FeatureMap::new(5, 5, minus).unwrap();
            // skip coordinates whose perturbation flips a median selection
            if smr_select_sources(&xp, 3).unwrap() != base_sources
                || smr_select_sources(&xm, 3).unwrap() != base_sources
            {
                continue;
            }
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * step);
            let denom = fd.abs().max(grad.values()[i].abs()).max(1e-4);
            assert!((fd - grad.values()[i]).abs() / denom < 1e-4);
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} of 25 coordinates were stable");
    }
}
