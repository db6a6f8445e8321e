//! Agglomerative Ward-D2 linkage on a precomputed dissimilarity matrix,
//! via the Lance-Williams update on squared distances, matching R's
//! `hclust(..., method = "ward.D2")`. Merge ties break toward the smallest
//! pair of cluster ids.

use serde::{Deserialize, Serialize};

use crate::dataset::{compact_strata, StrataAssignment};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One agglomeration step. Cluster ids follow the leaf-then-merge scheme:
/// 0..n-1 are observations, n + i is the cluster created by merge i.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

fn check_distance_matrix(d: &Matrix) -> Result<()> {
    let n = d.rows();
    if d.cols() != n {
        return Err(Error::Data("distance matrix must be square".into()));
    }
    for i in 0..n {
        if d.get(i, i) != 0.0 {
            return Err(Error::Data("distance matrix diagonal must be zero".into()));
        }
        for j in (i + 1)..n {
            if (d.get(i, j) - d.get(j, i)).abs() > 1e-12 {
                return Err(Error::Data("distance matrix must be symmetric".into()));
            }
        }
    }
    Ok(())
}

/// Full Ward-D2 merge sequence for an n x n distance matrix.
pub fn ward_linkage(d: &Matrix) -> Result<Dendrogram> {
    check_distance_matrix(d)?;
    let n = d.rows();
    if n == 0 {
        return Err(Error::Data("empty distance matrix".into()));
    }
    // work on squared distances between active clusters
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = d.get(i, j);
            s.set(i, j, v * v);
        }
    }
    let mut active: Vec<bool> = vec![true; n];
    let mut sizes: Vec<usize> = vec![1; n];
    // current dendrogram id of each active slot
    let mut ids: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for step in 0..n.saturating_sub(1) {
        // smallest squared distance over active pairs; first (i, j) in
        // ascending scan wins ties
        let mut bi = usize::MAX;
        let mut bj = usize::MAX;
        let mut best = f64::INFINITY;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if !active[j] {
                    continue;
                }
                if s.get(i, j) < best {
                    best = s.get(i, j);
                    bi = i;
                    bj = j;
                }
            }
        }
        let (ni, nj) = (sizes[bi] as f64, sizes[bj] as f64);
        let (ida, idb) = if ids[bi] <= ids[bj] {
            (ids[bi], ids[bj])
        } else {
            (ids[bj], ids[bi])
        };
        merges.push(Merge {
            a: ida,
            b: idb,
            height: best.max(0.0).sqrt(),
            size: sizes[bi] + sizes[bj],
        });
        // merged cluster lives in slot bi
        for k in 0..n {
            if !active[k] || k == bi || k == bj {
                continue;
            }
            let nk = sizes[k] as f64;
            let upd = ((ni + nk) * s.get(bi, k) + (nj + nk) * s.get(bj, k) - nk * best)
                / (ni + nj + nk);
            s.set(bi, k, upd);
            s.set(k, bi, upd);
        }
        sizes[bi] += sizes[bj];
        active[bj] = false;
        ids[bi] = n + step;
    }
    Ok(Dendrogram { n, merges })
}

/// Cluster labels from cutting the dendrogram at exactly `k` clusters.
/// Labels are raw (smallest member row index); callers compact them.
pub fn cut(dend: &Dendrogram, k: usize) -> Result<Vec<i64>> {
    let n = dend.n;
    if k < 1 || k > n {
        return Err(Error::Config(format!("cut k = {k} out of range 1..={n}")));
    }
    // union-find over the first n - k merges
    let mut parent: Vec<usize> = (0..2 * n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (step, m) in dend.merges.iter().take(n - k).enumerate() {
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        let rm = n + step;
        parent[ra] = rm;
        parent[rb] = rm;
    }
    // label each row by the smallest row index sharing its root
    let mut root_min: std::collections::BTreeMap<usize, usize> = Default::default();
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    for (i, &r) in roots.iter().enumerate() {
        root_min.entry(r).or_insert(i);
    }
    Ok(roots.iter().map(|r| root_min[r] as i64).collect())
}

/// Ward-D2 agglomeration of `1 - proximity` style distances, cut to `k`
/// strata with arm counts from `t`.
pub fn ward_cut(d: &Matrix, k: usize, t: &[u8]) -> Result<StrataAssignment> {
    let dend = ward_linkage(d)?;
    let labels = cut(&dend, k)?;
    Ok(compact_strata(&labels, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_matrix() -> Matrix {
        // zero within {0,1} and {2,3}, one across
        let mut d = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                if (i < 2) != (j < 2) {
                    d.set(i, j, 1.0);
                }
            }
        }
        d
    }

    #[test]
    fn perfect_blocks_recovered_at_k2() {
        let t = [1, 0, 1, 0];
        let s = ward_cut(&block_matrix(), 2, &t).unwrap();
        assert_eq!(s.j(), 2);
        assert_eq!(s.labels[0], s.labels[1]);
        assert_eq!(s.labels[2], s.labels[3]);
        assert_ne!(s.labels[0], s.labels[2]);
    }

    #[test]
    fn trivial_cuts() {
        let t = [1, 0, 1, 0];
        let s = ward_cut(&block_matrix(), 4, &t).unwrap();
        assert_eq!(s.j(), 4);
        assert!(s.counts.iter().all(|c| c.n == 1));
        let s = ward_cut(&block_matrix(), 1, &t).unwrap();
        assert_eq!(s.j(), 1);
    }

    #[test]
    fn out_of_range_k_errors() {
        let d = block_matrix();
        assert!(ward_cut(&d, 0, &[1, 0, 1, 0]).is_err());
        assert!(ward_cut(&d, 5, &[1, 0, 1, 0]).is_err());
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let mut d = Matrix::zeros(2, 2);
        d.set(0, 1, 1.0);
        assert!(ward_linkage(&d).is_err());
    }

    #[test]
    fn heights_non_decreasing() {
        // random-ish symmetric distances
        let n = 12;
        let mut d = Matrix::zeros(n, n);
        let mut v = 0.123_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                v = (v * 97.31).fract();
                d.set(i, j, v + 0.01);
                d.set(j, i, v + 0.01);
            }
        }
        let dend = ward_linkage(&d).unwrap();
        for w in dend.merges.windows(2) {
            assert!(w[1].height >= w[0].height - 1e-12);
        }
    }

    #[test]
    fn cuts_nest() {
        let n = 10;
        let mut d = Matrix::zeros(n, n);
        let mut v = 0.71_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                v = (v * 131.71).fract();
                d.set(i, j, v + 0.05);
                d.set(j, i, v + 0.05);
            }
        }
        let dend = ward_linkage(&d).unwrap();
        for k in (2..=n).rev() {
            let coarse = cut(&dend, k - 1).unwrap();
            let fine = cut(&dend, k).unwrap();
            // every fine cluster maps into exactly one coarse cluster
            let mut map: std::collections::BTreeMap<i64, i64> = Default::default();
            for i in 0..n {
                let prev = map.insert(fine[i], coarse[i]);
                if let Some(prev) = prev {
                    assert_eq!(prev, coarse[i], "cut at {k} does not nest in {}", k - 1);
                }
            }
            // exactly two fine clusters share a coarse cluster
            let distinct_fine: std::collections::BTreeSet<_> = fine.iter().collect();
            let distinct_coarse: std::collections::BTreeSet<_> = coarse.iter().collect();
            assert_eq!(distinct_fine.len(), k);
            assert_eq!(distinct_coarse.len(), k - 1);
        }
    }
}
