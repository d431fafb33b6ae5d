//! EHR similarity, triplet mining and the alignment losses.

use prism_diffcore::{Array, Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PrismError, Result};
use crate::synthgen::EhrSchema;

/// Per-feature kind and cohort range for Gower similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GowerScale {
    pub binary: Vec<bool>,
    pub range: Vec<f64>,
}

impl GowerScale {
    pub fn fit(schema: &EhrSchema, rows: &[Vec<f64>]) -> Result<Self> {
        let d = schema.len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for r in rows {
            if r.len() != d {
                return Err(PrismError::Shape {
                    what: "EHR row".into(),
                    expected: vec![d],
                    got: vec![r.len()],
                });
            }
            for (k, &v) in r.iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        Ok(Self {
            binary: schema.features.iter().map(|f| f.is_binary()).collect(),
            range: lo.iter().zip(&hi).map(|(l, h)| (h - l).max(0.0)).collect(),
        })
    }
}

/// Gower similarity in `[0, 1]`: equality for binary features,
/// `1 − |Δ| / range` (clamped) for continuous ones, averaged.
pub fn ehr_similarity(a: &[f64], b: &[f64], scale: &GowerScale) -> Result<f64> {
    let d = scale.binary.len();
    if a.len() != d || b.len() != d {
        return Err(PrismError::Shape {
            what: "ehr_similarity".into(),
            expected: vec![d],
            got: vec![a.len(), b.len()],
        });
    }
    let mut s = 0.0;
    for k in 0..d {
        s += if scale.binary[k] {
            if a[k] == b[k] { 1.0 } else { 0.0 }
        } else if scale.range[k] > 0.0 {
            (1.0 - (a[k] - b[k]).abs() / scale.range[k]).max(0.0)
        } else {
            1.0
        };
    }
    Ok(s / d as f64)
}

pub fn similarity_matrix(rows: &[Vec<f64>], scale: &GowerScale) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|a| rows.iter().map(|b| ehr_similarity(a, b, scale)).collect())
        .collect()
}

/// Every ordered `(i, j, k)` of distinct indices with
/// `sim[i][j] > sim[i][k] + delta`.
pub fn mine_triplets(sim: &[Vec<f64>], delta: f64) -> Vec<(usize, usize, usize)> {
    let n = sim.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            for k in 0..n {
                if k != i && k != j && sim[i][j] > sim[i][k] + delta {
                    out.push((i, j, k));
                }
            }
        }
    }
    out
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `Σ max(0, ‖a_i − e_j‖² − ‖a_i − e_k‖² + δ)` over triplets.
pub fn triangulation_loss(
    triplets: &[(usize, usize, usize)],
    z_align: &[Vec<f64>],
    z_ehr: &[Vec<f64>],
    delta: f64,
) -> f64 {
    triplets
        .iter()
        .map(|&(i, j, k)| (sqdist(&z_align[i], &z_ehr[j]) - sqdist(&z_align[i], &z_ehr[k]) + delta).max(0.0))
        .sum()
}

/// Batch mean of `‖a_i − r_i‖²`.
pub fn topology_loss(z_align: &[Vec<f64>], z_ref: &[Vec<f64>]) -> Result<f64> {
    if z_align.len() != z_ref.len() || z_align.is_empty() {
        return Err(PrismError::Shape {
            what: "topology_loss batch".into(),
            expected: vec![z_align.len()],
            got: vec![z_ref.len()],
        });
    }
    Ok(z_align.iter().zip(z_ref).map(|(a, r)| sqdist(a, r)).sum::<f64>() / z_align.len() as f64)
}

/// Squared distances `‖a_i − e_j‖²` as a flat `[B·B, 1]` column.
fn pair_sqdist<T: Real>(t: &mut Tape<T>, a: Var, e: Var) -> Result<Var> {
    let b = t.shape(a)[0];
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let ai = t.slice_rows(a, i, i + 1)?;
        let d = t.sub(e, ai)?;
        let d = t.square(d)?;
        rows.push(t.sum_last(d)?);
    }
    Ok(t.concat(&rows, prism_diffcore::Axis::Rows)?)
}

pub fn triangulation_graph<T: Real>(
    t: &mut Tape<T>,
    z_align: Var,
    z_ehr: Var,
    triplets: &[(usize, usize, usize)],
    delta: f64,
) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(t.constant(Array::scalar(T::zero()))?);
    }
    let b = t.shape(z_align)[0];
    let d = pair_sqdist(t, z_align, z_ehr)?;
    let pos: Vec<usize> = triplets.iter().map(|&(i, j, _)| i * b + j).collect();
    let neg: Vec<usize> = triplets.iter().map(|&(i, _, k)| i * b + k).collect();
    let dp = t.gather_rows(d, &pos)?;
    let dn = t.gather_rows(d, &neg)?;
    let h = t.sub(dp, dn)?;
    let h = t.add_scalar(h, delta)?;
    let h = t.relu(h)?;
    Ok(t.sum(h)?)
}

pub fn topology_graph<T: Real>(t: &mut Tape<T>, z_align: Var, z_ref: Var) -> Result<Var> {
    let d = t.sub(z_align, z_ref)?;
    let d = t.square(d)?;
    let s = t.sum_last(d)?;
    Ok(t.mean(s)?)
}

/// Sliced Wasserstein-2 between the two row sets along fixed unit
/// directions `dirs` (`[d, L]`): mean squared gap of sorted projections.
pub fn sliced_wasserstein_graph<T: Real>(t: &mut Tape<T>, a: Var, b: Var, dirs: &Array<T>) -> Result<Var> {
    let dv = t.constant(dirs.clone())?;
    let pa = t.matmul(a, dv)?;
    let pb = t.matmul(b, dv)?;
    let l = dirs.cols();
    let mut gaps = Vec::with_capacity(l);
    for c in 0..l {
        let ca = t.slice_cols(pa, c, c + 1)?;
        let cb = t.slice_cols(pb, c, c + 1)?;
        let sa = t.gather_rows(ca, &argsort(t.value(ca).data()))?;
        let sb = t.gather_rows(cb, &argsort(t.value(cb).data()))?;
        let g = t.sub(sa, sb)?;
        gaps.push(t.square(g)?);
    }
    let all = t.concat(&gaps, prism_diffcore::Axis::Cols)?;
    Ok(t.mean(all)?)
}

fn argsort<T: Real>(v: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scale_bin(d: usize) -> GowerScale {
        GowerScale {
            binary: vec![true; d],
            range: vec![1.0; d],
        }
    }

    #[test]
    fn similarity_examples() {
        let s = scale_bin(4);
        assert_eq!(ehr_similarity(&[1.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 1.0, 1.0], &s).unwrap(), 1.0);
        assert_eq!(ehr_similarity(&[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 1.0], &s).unwrap(), 0.0);
        assert_eq!(ehr_similarity(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &s).unwrap(), 0.5);
        let mixed = GowerScale {
            binary: vec![true, false],
            range: vec![1.0, 10.0],
        };
        // (1 + (1 - 4/10)) / 2
        assert!((ehr_similarity(&[1.0, 2.0], &[1.0, 6.0], &mixed).unwrap() - 0.8).abs() < 1e-15);
        assert!(ehr_similarity(&[1.0], &[1.0, 2.0], &mixed).is_err());
    }

    #[test]
    fn triplet_examples() {
        let sim = vec![vec![1.0, 0.9, 0.5], vec![0.9, 1.0, 0.9], vec![0.5, 0.9, 1.0]];
        let t = mine_triplets(&sim, 0.2);
        assert!(t.contains(&(0, 1, 2)));
        assert!(!t.contains(&(1, 0, 2)));
        assert!(mine_triplets(&vec![vec![1.0; 5]; 5], 0.2).is_empty());
    }

    #[test]
    fn loss_examples() {
        let za = vec![vec![0.0, 0.0]];
        let ze = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        // equal distances leave the margin
        let tri = triangulation_loss(&[(0, 0, 1)], &za, &ze, 0.2);
        assert!((tri - 0.2).abs() < 1e-15);
        let ze2 = vec![vec![0.0, 0.0], vec![0.3f64.sqrt(), 0.0]];
        let za2 = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        assert_eq!(triangulation_loss(&[(0, 0, 1)], &za2, &ze2, 0.2), 0.0);
        assert_eq!(triangulation_loss(&[], &za, &ze, 0.2), 0.0);

        let a = vec![vec![1.0; 5], vec![2.0; 5]];
        let r = vec![vec![0.0; 5], vec![1.0; 5]];
        assert_eq!(topology_loss(&a, &r).unwrap(), 5.0);
        assert_eq!(topology_loss(&a, &a).unwrap(), 0.0);
        let r2 = vec![vec![-1.0; 5], vec![0.0; 5]];
        assert_eq!(topology_loss(&a, &r2).unwrap(), 20.0);
        assert!(topology_loss(&a, &r[..1]).is_err());
    }

    #[test]
    fn graph_losses_match_scalar_routes() {
        let za = vec![vec![0.3, -1.0, 0.2], vec![1.0, 0.4, 0.0], vec![-0.5, 0.5, 0.9]];
        let ze = vec![vec![0.1, -0.2, 0.3], vec![0.7, 0.1, -0.6], vec![0.0, 0.8, 0.4]];
        let trip = vec![(0, 1, 2), (1, 0, 2), (2, 1, 0), (0, 2, 1)];
        let mut t = Tape::<f64>::inference();
        let a = t.constant(Array::from_f64(&[3, 3], &za.concat()).unwrap()).unwrap();
        let e = t.constant(Array::from_f64(&[3, 3], &ze.concat()).unwrap()).unwrap();
        let g = triangulation_graph(&mut t, a, e, &trip, 0.2).unwrap();
        assert!((t.scalar(g) - triangulation_loss(&trip, &za, &ze, 0.2)).abs() < 1e-12);
        let g = topology_graph(&mut t, a, e).unwrap();
        assert!((t.scalar(g) - topology_loss(&za, &ze).unwrap()).abs() < 1e-12);
        let dirs = Array::from_f64(&[3, 1], &[1.0, 0.0, 0.0]).unwrap();
        let sw = sliced_wasserstein_graph(&mut t, a, e, &dirs).unwrap();
        // sorted first coordinates: [-0.5, 0.3, 1.0] vs [0.0, 0.1, 0.7]
        let expected = (0.25 + 0.04 + 0.09) / 3.0;
        assert!((t.scalar(sw) - expected).abs() < 1e-12);
    }

    fn brute(sim: &[Vec<f64>], delta: f64) -> Vec<(usize, usize, usize)> {
        let n = sim.len();
        let mut v = Vec::new();
        for t in 0..n * n * n {
            let (i, j, k) = (t / (n * n), (t / n) % n, t % n);
            if i != j && j != k && i != k && sim[i][j] - sim[i][k] > delta {
                v.push((i, j, k));
            }
        }
        v
    }

    fn rotate(v: &[Vec<f64>], th: f64) -> Vec<Vec<f64>> {
        v.iter()
            .map(|x| vec![th.cos() * x[0] - th.sin() * x[1], th.sin() * x[0] + th.cos() * x[1], x[2]])
            .collect()
    }

    proptest! {
        #[test]
        fn mining_matches_brute_force(rows in prop::collection::vec(prop::collection::vec(0u8..2, 6), 3..=10)) {
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
            let sim = similarity_matrix(&rows, &scale_bin(6)).unwrap();
            let mut a = mine_triplets(&sim, 0.2);
            let mut b = brute(&sim, 0.2);
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn triangulation_is_rotation_invariant(
            pts in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 8),
            th in 0.0f64..6.3,
        ) {
            let (za, ze) = (pts[..4].to_vec(), pts[4..].to_vec());
            let trip = vec![(0, 1, 2), (1, 2, 3), (3, 0, 1), (2, 3, 0)];
            let l0 = triangulation_loss(&trip, &za, &ze, 0.2);
            let l1 = triangulation_loss(&trip, &rotate(&za, th), &rotate(&ze, th), 0.2);
            prop_assert!(l0 >= 0.0);
            prop_assert!((l0 - l1).abs() < 1e-6);
        }
    }
}
