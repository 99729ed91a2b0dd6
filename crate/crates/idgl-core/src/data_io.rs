//! Dataset ingestion, split management, synthetic generators, and run
//! configuration.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{IdglError, Result};
use crate::graph_construction::{read_edge_list, write_edge_list};
use crate::linalg::{CsrSparse, Dense};

/// One classification instance: features, optional initial adjacency, labels,
/// and index splits. Inductive graph-level datasets use a single-element `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub x: Dense,
    pub a0: Option<CsrSparse>,
    pub y: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub dev_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub n_classes: usize,
}

impl GraphDataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if !self.y.is_empty() && self.y.len() != n {
            return Err(IdglError::InvalidInput(format!(
                "{} labels for {n} rows",
                self.y.len()
            )));
        }
        if let Some(&bad) = self.y.iter().find(|&&c| c >= self.n_classes) {
            return Err(IdglError::InvalidInput(format!(
                "label {bad} outside 0..{}",
                self.n_classes
            )));
        }
        if let Some(a) = &self.a0 {
            if a.shape() != (n, n) {
                return Err(IdglError::dims("dataset adjacency", a.shape(), (n, n)));
            }
        }
        if !self.x.is_finite() {
            return Err(IdglError::NonFinite("dataset features"));
        }
        let mut seen = vec![false; n];
        for idx in [&self.train_idx, &self.dev_idx, &self.test_idx] {
            for &i in idx {
                if i >= n {
                    return Err(IdglError::InvalidInput(format!("split index {i} out of range")));
                }
                if seen[i] {
                    return Err(IdglError::InvalidInput(format!("index {i} in two splits")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Split sizes drawn by seeded class-stratified sampling. `test: None` takes
/// every node left after train and dev.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: usize,
    pub dev: usize,
    pub test: Option<usize>,
    pub seed: u64,
}

/// Largest-remainder apportionment of `total` over classes, capped by class
/// size with deterministic redistribution of any overflow.
fn apportion(class_sizes: &[usize], total: usize) -> Result<Vec<usize>> {
    let n: usize = class_sizes.iter().sum();
    if total > n {
        return Err(IdglError::InvalidInput(format!(
            "cannot draw {total} items from {n} available"
        )));
    }
    let mut counts: Vec<usize> = class_sizes.iter().map(|&s| s * total / n).collect();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = class_sizes[a] * total % n;
        let fb = class_sizes[b] * total % n;
        fb.cmp(&fa).then(a.cmp(&b))
    });
    let mut deficit = total - counts.iter().sum::<usize>();
    for &c in &order {
        if deficit == 0 {
            break;
        }
        if counts[c] < class_sizes[c] {
            counts[c] += 1;
            deficit -= 1;
        }
    }
    // Clamp any overshoot (possible only via the remainder bumps above when a
    // class is already full) and hand the spares to classes with room.
    let mut spare = 0;
    for (c, count) in counts.iter_mut().enumerate() {
        if *count > class_sizes[c] {
            spare += *count - class_sizes[c];
            *count = class_sizes[c];
        }
    }
    spare += deficit;
    while spare > 0 {
        let c = (0..class_sizes.len())
            .filter(|&c| counts[c] < class_sizes[c])
            .max_by_key(|&c| (class_sizes[c] - counts[c], usize::MAX - c))
            .expect("total <= n guarantees capacity");
        counts[c] += 1;
        spare -= 1;
    }
    Ok(counts)
}

/// Seeded stratified sampling: shuffles each class bucket once, then deals
/// train, dev, and test counts in that order.
pub fn stratified_split(
    y: &[usize],
    n_classes: usize,
    spec: &SplitSpec,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in y.iter().enumerate() {
        if c >= n_classes {
            return Err(IdglError::InvalidInput(format!("label {c} outside 0..{n_classes}")));
        }
        buckets[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for b in &mut buckets {
        b.shuffle(&mut rng);
    }
    let take = |buckets: &mut [Vec<usize>], counts: &[usize]| -> Vec<usize> {
        let mut out = Vec::new();
        for (b, &c) in buckets.iter_mut().zip(counts) {
            out.extend(b.drain(..c));
        }
        out.sort_unstable();
        out
    };
    let sizes: Vec<usize> = buckets.iter().map(Vec::len).collect();
    let train_counts = apportion(&sizes, spec.train)?;
    let train = take(&mut buckets, &train_counts);
    let sizes: Vec<usize> = buckets.iter().map(Vec::len).collect();
    let dev_counts = apportion(&sizes, spec.dev)?;
    let dev = take(&mut buckets, &dev_counts);
    let sizes: Vec<usize> = buckets.iter().map(Vec::len).collect();
    let test = match spec.test {
        Some(t) => {
            let counts = apportion(&sizes, t)?;
            take(&mut buckets, &counts)
        }
        None => take(&mut buckets, &sizes),
    };
    Ok((train, dev, test))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> IdglError {
    IdglError::Parse { file: path.display().to_string(), line, msg: msg.into() }
}

/// Reads a numeric CSV into a dense matrix. Rows must agree in width.
pub fn read_csv_matrix(path: &Path, has_header: bool) -> Result<Dense> {
    let file = std::fs::File::open(path).map_err(|e| IdglError::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IdglError::io(path.display().to_string(), e))?;
        if lineno == 0 && has_header {
            continue;
        }
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in body.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("non-numeric cell {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno + 1, format!("non-finite cell {cell:?}")));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    lineno + 1,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Dense::from_rows(&rows)
}

/// Reads one integer label per line and remaps the sorted distinct values to
/// 0..C-1. Returns the remapped labels and C.
pub fn read_labels(path: &Path, has_header: bool) -> Result<(Vec<usize>, usize)> {
    let file = std::fs::File::open(path).map_err(|e| IdglError::io(path.display().to_string(), e))?;
    let mut raw: Vec<i64> = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IdglError::io(path.display().to_string(), e))?;
        if lineno == 0 && has_header {
            continue;
        }
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        let v: i64 = body
            .parse()
            .map_err(|_| parse_err(path, lineno + 1, format!("bad label {body:?}")))?;
        raw.push(v);
    }
    if raw.is_empty() {
        return Err(parse_err(path, 1, "no labels"));
    }
    let mut distinct: Vec<i64> = raw.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let y = raw
        .into_iter()
        .map(|v| distinct.binary_search(&v).expect("value came from this list"))
        .collect();
    Ok((y, distinct.len()))
}

/// Per-column standardization to zero mean and unit variance; constant
/// columns become all-zero.
pub fn standardize_columns(x: &mut Dense) {
    let (n, d) = x.shape();
    for j in 0..d {
        let mean = (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for i in 0..n {
            x[(i, j)] = if std > 0.0 { (x[(i, j)] - mean) / std } else { 0.0 };
        }
    }
}

/// Tabular (graph-free) dataset: features CSV plus labels CSV, standardized
/// per column, split by seeded stratified sampling.
pub fn load_tabular(
    features_csv: &Path,
    labels_csv: &Path,
    split: &SplitSpec,
    has_header: bool,
) -> Result<GraphDataset> {
    let mut x = read_csv_matrix(features_csv, has_header)?;
    let (y, n_classes) = read_labels(labels_csv, has_header)?;
    if y.len() != x.rows() {
        return Err(IdglError::InvalidInput(format!(
            "{} feature rows but {} labels",
            x.rows(),
            y.len()
        )));
    }
    standardize_columns(&mut x);
    let (train_idx, dev_idx, test_idx) = stratified_split(&y, n_classes, split)?;
    let ds = GraphDataset { x, a0: None, y, train_idx, dev_idx, test_idx, n_classes };
    ds.validate()?;
    Ok(ds)
}

/// Citation-style dataset: edge list over contiguous node ids plus features
/// and labels. Features are used as-is (typically already bag-of-words).
pub fn load_citation(
    edge_list_path: &Path,
    features_csv: &Path,
    labels_csv: &Path,
    split: &SplitSpec,
    has_header: bool,
) -> Result<GraphDataset> {
    let x = read_csv_matrix(features_csv, has_header)?;
    let (y, n_classes) = read_labels(labels_csv, has_header)?;
    if y.len() != x.rows() {
        return Err(IdglError::InvalidInput(format!(
            "{} feature rows but {} labels",
            x.rows(),
            y.len()
        )));
    }
    let a0 = read_edge_list(edge_list_path, x.rows())?;
    let (train_idx, dev_idx, test_idx) = stratified_split(&y, n_classes, split)?;
    let ds = GraphDataset { x, a0: Some(a0), y, train_idx, dev_idx, test_idx, n_classes };
    ds.validate()?;
    Ok(ds)
}

fn write_index_line(out: &mut impl Write, name: &str, idx: &[usize], path: &Path) -> Result<()> {
    let joined: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
    writeln!(out, "{name} {}", joined.join(" "))
        .map_err(|e| IdglError::io(path.display().to_string(), e))
}

/// Serializes a dataset into a directory (features.csv, labels.csv,
/// splits.txt, optional edges.txt). Floats use the shortest round-trip
/// representation, so load_dataset restores the exact bits.
pub fn save_dataset(ds: &GraphDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| IdglError::io(dir.display().to_string(), e))?;
    let feat_path = dir.join("features.csv");
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&feat_path).map_err(|e| IdglError::io(feat_path.display().to_string(), e))?,
    );
    for i in 0..ds.x.rows() {
        let cells: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", cells.join(","))
            .map_err(|e| IdglError::io(feat_path.display().to_string(), e))?;
    }
    drop(out);

    let label_path = dir.join("labels.csv");
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&label_path).map_err(|e| IdglError::io(label_path.display().to_string(), e))?,
    );
    for &c in &ds.y {
        writeln!(out, "{c}").map_err(|e| IdglError::io(label_path.display().to_string(), e))?;
    }
    drop(out);

    let split_path = dir.join("splits.txt");
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&split_path).map_err(|e| IdglError::io(split_path.display().to_string(), e))?,
    );
    writeln!(out, "n_classes {}", ds.n_classes)
        .map_err(|e| IdglError::io(split_path.display().to_string(), e))?;
    write_index_line(&mut out, "train", &ds.train_idx, &split_path)?;
    write_index_line(&mut out, "dev", &ds.dev_idx, &split_path)?;
    write_index_line(&mut out, "test", &ds.test_idx, &split_path)?;
    drop(out);

    if let Some(a0) = &ds.a0 {
        write_edge_list(a0, &dir.join("edges.txt"))?;
    }
    Ok(())
}

/// Reads back a directory written by save_dataset, verbatim (no
/// re-standardization, no label remapping beyond identity).
pub fn load_dataset(dir: &Path) -> Result<GraphDataset> {
    let x = read_csv_matrix(&dir.join("features.csv"), false)?;
    let (y, _) = read_labels(&dir.join("labels.csv"), false)?;
    let split_path = dir.join("splits.txt");
    let file = std::fs::File::open(&split_path)
        .map_err(|e| IdglError::io(split_path.display().to_string(), e))?;
    let mut n_classes = 0usize;
    let mut idx: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IdglError::io(split_path.display().to_string(), e))?;
        let mut parts = line.split_whitespace();
        let key = match parts.next() {
            Some(k) => k,
            None => continue,
        };
        let mut parse_list = || -> Result<Vec<usize>> {
            parts
                .by_ref()
                .map(|t| {
                    t.parse()
                        .map_err(|_| parse_err(&split_path, lineno + 1, format!("bad index {t:?}")))
                })
                .collect()
        };
        match key {
            "n_classes" => {
                n_classes = parts
                    .next()
                    .ok_or_else(|| parse_err(&split_path, lineno + 1, "missing value"))?
                    .parse()
                    .map_err(|_| parse_err(&split_path, lineno + 1, "bad n_classes"))?;
            }
            "train" => idx[0] = parse_list()?,
            "dev" => idx[1] = parse_list()?,
            "test" => idx[2] = parse_list()?,
            other => return Err(parse_err(&split_path, lineno + 1, format!("unknown key {other:?}"))),
        }
    }
    let edges = dir.join("edges.txt");
    let a0 = if edges.exists() { Some(read_edge_list(&edges, x.rows())?) } else { None };
    let [train_idx, dev_idx, test_idx] = idx;
    let ds = GraphDataset { x, a0, y, train_idx, dev_idx, test_idx, n_classes };
    ds.validate()?;
    Ok(ds)
}

/// Synthetic inductive corpus: each graph's nodes are drawn from one
/// class-specific Gaussian (mean 4 on coordinate c mod d), the graph label is
/// the mixture id, and no adjacency is provided so the kNN path is exercised.
pub fn synth_inductive(
    n_graphs: usize,
    nodes_per_graph: usize,
    n_classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<GraphDataset>> {
    if n_graphs == 0 || nodes_per_graph == 0 || n_classes == 0 {
        return Err(IdglError::InvalidInput("generator parameters must be positive".into()));
    }
    let d = n_classes.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(n_graphs);
    for g in 0..n_graphs {
        let c = g % n_classes;
        let mut data = Vec::with_capacity(nodes_per_graph * d);
        for _ in 0..nodes_per_graph {
            for j in 0..d {
                let mean = if j == c % d { 4.0 } else { 0.0 };
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mean + noise * z);
            }
        }
        graphs.push(GraphDataset {
            x: Dense::from_vec(nodes_per_graph, d, data)?,
            a0: None,
            y: vec![c],
            train_idx: Vec::new(),
            dev_idx: Vec::new(),
            test_idx: Vec::new(),
            n_classes,
        });
    }
    Ok(graphs)
}

/// Synthetic transductive dataset: a balanced stochastic block model with
/// Gaussian class features (mean 3 on coordinate c mod d). Edge pairs are
/// streamed with one Bernoulli draw each.
#[allow(clippy::too_many_arguments)]
pub fn synth_transductive(
    n: usize,
    d: usize,
    n_classes: usize,
    p_in: f64,
    p_out: f64,
    noise: f64,
    seed: u64,
    split: &SplitSpec,
) -> Result<GraphDataset> {
    if n == 0 || d == 0 || n_classes == 0 {
        return Err(IdglError::InvalidInput("generator parameters must be positive".into()));
    }
    for p in [p_in, p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(IdglError::InvalidInput(format!("probability {p} out of [0,1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    let mut data = Vec::with_capacity(n * d);
    for &c in &y {
        for j in 0..d {
            let mean = if j == c % d { 3.0 } else { 0.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mean + noise * z);
        }
    }
    let x = Dense::from_vec(n, d, data)?;
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if y[i] == y[j] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                triplets.push((i, j, 1.0));
                triplets.push((j, i, 1.0));
            }
        }
    }
    let a0 = CsrSparse::from_triplets(n, n, triplets)?;
    let (train_idx, dev_idx, test_idx) = stratified_split(&y, n_classes, split)?;
    let ds = GraphDataset { x, a0: Some(a0), y, train_idx, dev_idx, test_idx, n_classes };
    ds.validate()?;
    Ok(ds)
}

/// Environment variable naming the directory that holds prepared datasets.
pub const DATA_DIR_ENV: &str = "IDGL_DATA_DIR";

/// Explicit path if given, else `$IDGL_DATA_DIR`, else `./data`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> std::path::PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Ok(v) = std::env::var(DATA_DIR_ENV) {
        if !v.is_empty() {
            return std::path::PathBuf::from(v);
        }
    }
    std::path::PathBuf::from("data")
}

/// Published split sizes for the named benchmarks. Tabular splits leave the
/// test count as the remainder; the split is re-sampled per run seed.
pub fn paper_split(dataset: &str, seed: u64) -> Option<SplitSpec> {
    let (train, dev, test) = match dataset.to_ascii_lowercase().as_str() {
        "cora" => (140, 500, Some(1000)),
        "citeseer" => (120, 500, Some(1000)),
        "pubmed" => (60, 500, Some(1000)),
        "wine" => (10, 20, None),
        "cancer" => (10, 20, None),
        "digits" => (50, 100, None),
        _ => return None,
    };
    Some(SplitSpec { train, dev, test, seed })
}

/// Loads a named benchmark from `dir` using the file conventions of the
/// prep scripts: `{name}_features.csv` and `{name}_labels.csv`, plus
/// `{name}_edges.txt` when the dataset ships a graph. Features of graph
/// datasets are used as-is; tabular features are standardized.
pub fn load_named_dataset(name: &str, dir: &Path, seed: u64) -> Result<GraphDataset> {
    let split = paper_split(name, seed).ok_or_else(|| {
        IdglError::InvalidInput(format!(
            "unknown dataset {name}; expected cora, citeseer, pubmed, wine, cancer, or digits"
        ))
    })?;
    load_named_with_split(name, dir, &split)
}

/// Same as [`load_named_dataset`] but with caller-chosen split sizes.
pub fn load_named_with_split(name: &str, dir: &Path, split: &SplitSpec) -> Result<GraphDataset> {
    let lname = name.to_ascii_lowercase();
    let features = dir.join(format!("{lname}_features.csv"));
    let labels = dir.join(format!("{lname}_labels.csv"));
    let edges = dir.join(format!("{lname}_edges.txt"));
    if !features.exists() {
        return Err(IdglError::InvalidInput(format!(
            "{} not found; prepare the dataset under {} first",
            features.display(),
            dir.display()
        )));
    }
    if edges.exists() {
        load_citation(&edges, &features, &labels, split, false)
    } else {
        load_tabular(&features, &labels, split, false)
    }
}
