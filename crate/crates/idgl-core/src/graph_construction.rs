//! Initial graph structures: kNN construction from features, symmetric
//! normalization, and random edge perturbations for robustness experiments.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IdglError, Result};
use crate::linalg::{kernels, CsrSparse, Dense};

/// The given (or kNN-constructed) adjacency together with its normalized
/// form used for message passing.
#[derive(Debug, Clone)]
pub struct InitialGraph {
    pub a0: CsrSparse,
    pub l0_sym: CsrSparse,
}

impl InitialGraph {
    pub fn new(a0: CsrSparse, add_self_loops: bool) -> Result<Self> {
        let l0_sym = sym_normalize(&a0, add_self_loops)?;
        Ok(InitialGraph { a0, l0_sym })
    }
}

/// kNN graph under cosine similarity: each node links to its `k` most
/// similar other nodes (ties broken toward the lower index), symmetrized by
/// union, all weights 1.
pub fn knn_graph(x: &Dense, k: usize) -> Result<CsrSparse> {
    let n = x.rows();
    if k == 0 || k >= n {
        return Err(IdglError::InvalidInput(format!(
            "k must satisfy 1 <= k < n, got k={k}, n={n}"
        )));
    }
    let mut normalized = x.clone();
    for i in 0..n {
        let norm = normalized.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(IdglError::DegenerateFeature(i));
        }
        for v in normalized.row_mut(i) {
            *v /= norm;
        }
    }
    let sims = kernels::matmul_nt(&normalized, &normalized)?;
    let mut chosen = vec![false; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = sims.row(i);
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("similarities are finite").then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            chosen[i * n + j] = true;
        }
    }
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && (chosen[i * n + j] || chosen[j * n + i]) {
                triplets.push((i, j, 1.0));
            }
        }
    }
    CsrSparse::from_triplets(n, n, triplets)
}

/// `D^{-1/2} Â D^{-1/2}` with `Â = a0 + I` when `add_self_loops`. The scaling
/// factor for entry (i, j) is computed as one product `s_i * s_j`, which
/// keeps the output exactly equal to its transpose.
pub fn sym_normalize(a0: &CsrSparse, add_self_loops: bool) -> Result<CsrSparse> {
    let n = a0.rows();
    if a0.cols() != n {
        return Err(IdglError::dims("sym_normalize", a0.shape(), a0.shape()));
    }
    if let Some((i, j, v)) = a0.iter().find(|&(_, _, v)| v < 0.0) {
        return Err(IdglError::InvalidInput(format!(
            "negative adjacency entry {v} at ({i}, {j})"
        )));
    }
    check_symmetric(a0)?;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(a0.nnz() + n);
    if add_self_loops {
        let mut has_diag = vec![false; n];
        for (i, j, v) in a0.iter() {
            if i == j {
                has_diag[i] = true;
                triplets.push((i, j, v + 1.0));
            } else {
                triplets.push((i, j, v));
            }
        }
        for (i, seen) in has_diag.into_iter().enumerate() {
            if !seen {
                triplets.push((i, i, 1.0));
            }
        }
    } else {
        triplets.extend(a0.iter());
    }
    let mut degree = vec![0.0_f64; n];
    for &(i, _, v) in &triplets {
        degree[i] += v;
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    for (i, j, v) in &mut triplets {
        *v *= inv_sqrt[*i] * inv_sqrt[*j];
    }
    CsrSparse::from_triplets(n, n, triplets)
}

fn check_symmetric(a: &CsrSparse) -> Result<()> {
    let t = a.transpose();
    if t == *a {
        return Ok(());
    }
    let mut diff = 0.0_f64;
    for (i, j, v) in a.iter() {
        diff = diff.max((v - t.get(i, j)).abs());
    }
    Err(IdglError::Asymmetric(diff))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    Delete,
    Add,
}

/// Random symmetric edge perturbation. Delete removes each existing
/// undirected edge with probability `p`; add inserts each absent pair with
/// probability `p` (streaming one Bernoulli draw per pair, never
/// materializing the n^2 candidate set). Self-loops are never created and
/// existing diagonal entries are left untouched.
pub fn perturb_edges(a0: &CsrSparse, p: f64, mode: PerturbMode, seed: u64) -> Result<CsrSparse> {
    if !(0.0..=1.0).contains(&p) {
        return Err(IdglError::InvalidInput(format!("probability {p} out of [0,1]")));
    }
    let n = a0.rows();
    if a0.cols() != n {
        return Err(IdglError::dims("perturb_edges", a0.shape(), a0.shape()));
    }
    check_symmetric(a0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    match mode {
        PerturbMode::Delete => {
            for (i, j, v) in a0.iter() {
                if i == j {
                    triplets.push((i, j, v));
                } else if i < j && rng.gen::<f64>() >= p {
                    triplets.push((i, j, v));
                    triplets.push((j, i, v));
                }
            }
        }
        PerturbMode::Add => {
            triplets.extend(a0.iter());
            for i in 0..n {
                for j in (i + 1)..n {
                    if a0.get(i, j) == 0.0 && rng.gen::<f64>() < p {
                        triplets.push((i, j, 1.0));
                        triplets.push((j, i, 1.0));
                    }
                }
            }
        }
    }
    CsrSparse::from_triplets(n, n, triplets)
}

/// Reads "src dst [weight]" lines (0-indexed, undirected edges listed once,
/// `#` comments allowed) into a symmetric adjacency over `n` nodes.
pub fn read_edge_list(path: &Path, n: usize) -> Result<CsrSparse> {
    let file = std::fs::File::open(path).map_err(|e| IdglError::io(path.display().to_string(), e))?;
    let mut triplets = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IdglError::io(path.display().to_string(), e))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let parse = |tok: Option<&str>, what: &str| -> Result<usize> {
            tok.ok_or_else(|| IdglError::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: format!("missing {what}"),
            })?
            .parse()
            .map_err(|_| IdglError::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: format!("invalid {what}"),
            })
        };
        let src = parse(parts.next(), "source id")?;
        let dst = parse(parts.next(), "target id")?;
        let weight: f64 = match parts.next() {
            Some(tok) => tok.parse().map_err(|_| IdglError::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: "invalid weight".into(),
            })?,
            None => 1.0,
        };
        if src >= n || dst >= n {
            return Err(IdglError::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: format!("node id out of range (n = {n})"),
            });
        }
        triplets.push((src, dst, weight));
        if src != dst {
            triplets.push((dst, src, weight));
        }
    }
    CsrSparse::from_triplets(n, n, triplets)
}

/// Writes the upper triangle (plus diagonal) as "src dst weight" lines.
pub fn write_edge_list(a: &CsrSparse, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| IdglError::io(path.display().to_string(), e))?,
    );
    for (i, j, v) in a.iter() {
        if i <= j {
            writeln!(out, "{i} {j} {v}").map_err(|e| IdglError::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(n: usize) -> CsrSparse {
        let mut triplets = Vec::new();
        for i in 0..n {
            let j = (i + 1) % n;
            triplets.push((i, j, 1.0));
            triplets.push((j, i, 1.0));
        }
        CsrSparse::from_triplets(n, n, triplets).unwrap()
    }

    #[test]
    fn knn_identical_rows_tie_break() {
        let x = Dense::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let g = knn_graph(&x, 1).unwrap();
        assert!(g.is_symmetric());
        for i in 0..3 {
            assert_eq!(g.get(i, i), 0.0);
            assert!(g.row(i).0.len() >= 1);
        }
        // Ties resolve toward the lower index: node 0 picks 1, others pick 0.
        assert_eq!(g.get(1, 0), 1.0);
        assert_eq!(g.get(2, 0), 1.0);
    }

    #[test]
    fn knn_two_far_clusters_stay_separate() {
        let mut rows = Vec::new();
        for i in 0..5 {
            rows.push(vec![100.0, i as f64 * 0.1, 0.0]);
        }
        for i in 0..5 {
            rows.push(vec![-100.0, 0.0, i as f64 * 0.1 + 0.05]);
        }
        let g = knn_graph(&Dense::from_rows(&rows).unwrap(), 2).unwrap();
        for i in 0..5 {
            for j in 5..10 {
                assert_eq!(g.get(i, j), 0.0);
                assert_eq!(g.get(j, i), 0.0);
            }
        }
    }

    #[test]
    fn knn_rejects_zero_norm_row() {
        let x = Dense::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(knn_graph(&x, 1), Err(IdglError::DegenerateFeature(1))));
    }

    #[test]
    fn knn_random_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..30 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Dense::from_vec(30, 4, data).unwrap();
        let g = knn_graph(&x, 3).unwrap();
        assert!(g.is_symmetric());
        for i in 0..30 {
            assert_eq!(g.get(i, i), 0.0);
            assert!(g.row(i).0.len() >= 3);
        }
    }

    #[test]
    fn sym_normalize_single_node() {
        let a = CsrSparse::zeros(1, 1);
        let l = sym_normalize(&a, true).unwrap();
        assert_eq!(l.get(0, 0), 1.0);
    }

    #[test]
    fn sym_normalize_two_nodes_no_loops() {
        let a = CsrSparse::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let l = sym_normalize(&a, false).unwrap();
        assert_eq!(l.to_dense().as_slice(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn sym_normalize_path_graph_hand_values() {
        let a = CsrSparse::from_triplets(
            3,
            3,
            vec![(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)],
        )
        .unwrap();
        let l = sym_normalize(&a, true).unwrap();
        let s6 = 1.0 / 6.0_f64.sqrt();
        let expect = [0.5, s6, 0.0, s6, 1.0 / 3.0, s6, 0.0, s6, 0.5];
        for (got, want) in l.to_dense().as_slice().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sym_normalize_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut triplets = Vec::new();
        for i in 0..20 {
            for j in (i + 1)..20 {
                if rng.gen::<f64>() < 0.2 {
                    let w = rng.gen_range(0.5..2.0);
                    triplets.push((i, j, w));
                    triplets.push((j, i, w));
                }
            }
        }
        let a = CsrSparse::from_triplets(20, 20, triplets).unwrap();
        let l = sym_normalize(&a, true).unwrap();
        assert_eq!(l.transpose(), l);
    }

    #[test]
    fn sym_normalize_spectral_radius_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..5 {
            let n = 12;
            let mut triplets = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.gen::<f64>() < 0.3 {
                        triplets.push((i, j, 1.0));
                        triplets.push((j, i, 1.0));
                    }
                }
            }
            let a = CsrSparse::from_triplets(n, n, triplets).unwrap();
            let l = sym_normalize(&a, true).unwrap();
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            let mut eig = 0.0;
            for _ in 0..200 {
                let d = Dense::from_vec(n, 1, v.clone()).unwrap();
                let next = l.spmm(&d).unwrap();
                eig = next.as_slice().iter().map(|x| x.abs()).fold(0.0, f64::max);
                if eig == 0.0 {
                    break;
                }
                v = next.as_slice().iter().map(|x| x / eig).collect();
            }
            assert!(eig <= 1.0 + 1e-9, "trial {trial}: spectral radius {eig}");
        }
    }

    #[test]
    fn sym_normalize_rejects_asymmetric() {
        let a = CsrSparse::from_triplets(2, 2, vec![(0, 1, 1.0)]).unwrap();
        assert!(matches!(sym_normalize(&a, true), Err(IdglError::Asymmetric(_))));
    }

    #[test]
    fn perturb_p_zero_is_identity() {
        let g = ring(10);
        assert_eq!(perturb_edges(&g, 0.0, PerturbMode::Delete, 7).unwrap(), g);
        assert_eq!(perturb_edges(&g, 0.0, PerturbMode::Add, 7).unwrap(), g);
    }

    #[test]
    fn perturb_p_one_delete_empties() {
        let g = ring(10);
        assert_eq!(perturb_edges(&g, 1.0, PerturbMode::Delete, 7).unwrap().nnz(), 0);
    }

    #[test]
    fn perturb_delete_counts_in_binomial_interval() {
        let g = ring(100);
        let mut total = 0;
        for seed in 0..20 {
            let out = perturb_edges(&g, 0.5, PerturbMode::Delete, seed).unwrap();
            let surviving = out.nnz() / 2;
            // Per-seed: stay within ~3.9 sigma of Binomial(100, 0.5).
            assert!((31..=69).contains(&surviving), "seed {seed}: {surviving}");
            total += surviving;
        }
        // Aggregate over 20 seeds: 2000 Bernoulli trials, 99.9% interval.
        assert!((926..=1074).contains(&total), "total {total}");
    }

    #[test]
    fn perturb_preserves_symmetry_never_self_loops() {
        let g = ring(30);
        for &mode in &[PerturbMode::Delete, PerturbMode::Add] {
            let out = perturb_edges(&g, 0.3, mode, 99).unwrap();
            assert!(out.is_symmetric());
            for i in 0..30 {
                assert_eq!(out.get(i, i), 0.0);
            }
        }
    }

    #[test]
    fn edge_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.txt");
        let g = ring(6);
        write_edge_list(&g, &path).unwrap();
        let back = read_edge_list(&path, 6).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn edge_list_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "0 1\n2 oops\n").unwrap();
        match read_edge_list(&path, 3) {
            Err(IdglError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn initial_graph_builds_both_forms() {
        let g = ring(5);
        let init = InitialGraph::new(g.clone(), true).unwrap();
        assert_eq!(init.a0, g);
        assert!(init.l0_sym.is_symmetric());
        assert!(init.l0_sym.get(0, 0) > 0.0);
    }
}
