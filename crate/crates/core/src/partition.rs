//! Diverse class subsets from classifier-head weights.
//!
//! Each class is represented by its column in the final linear layer. An RBF kernel over those
//! columns defines a k-DPP; exact samples are drawn by the spectral two-phase algorithm
//! (eigenvector selection through elementary symmetric polynomials, then sequential item
//! selection with Gram-Schmidt updates of the eigenvector basis). Repeating the draw on the
//! classes that remain yields a partition of the label space.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues at or below this fraction of the largest are treated as zero.
const RELATIVE_EIGEN_FLOOR: f64 = 1e-10;

/// Class centres: column `c` of `weights` represents `class_ids[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpace {
    weights: DMatrix<f64>,
    class_ids: Vec<usize>,
}

impl ClassSpace {
    pub fn new(weights: DMatrix<f64>, class_ids: Vec<usize>) -> Result<Self> {
        if weights.ncols() == 0 {
            return Err(Error::Input("class space needs at least one class".into()));
        }
        if class_ids.len() != weights.ncols() {
            return Err(Error::Input(format!(
                "{} class ids for {} weight columns",
                class_ids.len(),
                weights.ncols()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("class weights contain non-finite values".into()));
        }
        let mut sorted = class_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("class ids must be distinct".into()));
        }
        Ok(Self { weights, class_ids })
    }

    /// Builds a space from per-class vectors, ids `0..K`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let k = columns.len();
        let d = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != d) {
            return Err(Error::Input("class vectors have differing lengths".into()));
        }
        let weights = DMatrix::from_fn(d, k, |r, c| columns[c][r]);
        Self::new(weights, (0..k).collect())
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    fn position(&self, id: usize) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == id)
            .ok_or_else(|| Error::Input(format!("class id {id} not in class space")))
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        (self.weights.column(i) - self.weights.column(j)).norm_squared()
    }

    /// Cosine similarity of two columns by position; zero when either column vanishes.
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.weights.column(i), self.weights.column(j));
        let denom = a.norm() * b.norm();
        if denom == 0.0 {
            0.0
        } else {
            a.dot(&b) / denom
        }
    }

    /// Median of pairwise Euclidean distances between distinct columns.
    pub fn median_pairwise_distance(&self) -> f64 {
        let k = self.num_classes();
        let mut d: Vec<f64> = (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| self.sq_dist(i, j).sqrt())
            .collect();
        if d.is_empty() {
            return 0.0;
        }
        d.sort_by(f64::total_cmp);
        let n = d.len();
        if n % 2 == 1 {
            d[n / 2]
        } else {
            0.5 * (d[n / 2 - 1] + d[n / 2])
        }
    }
}

/// RBF bandwidth choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Median pairwise distance of the weight columns (1.0 when degenerate).
    Auto,
    Fixed(f64),
}

impl Bandwidth {
    pub fn resolve(self, space: &ClassSpace) -> Result<f64> {
        match self {
            Bandwidth::Fixed(b) if b > 0.0 && b.is_finite() => Ok(b),
            Bandwidth::Fixed(b) => Err(Error::Parameter(format!(
                "bandwidth must be positive and finite, got {b}"
            ))),
            Bandwidth::Auto => {
                let m = space.median_pairwise_distance();
                Ok(if m > 0.0 && m.is_finite() { m } else { 1.0 })
            }
        }
    }
}

impl std::str::FromStr for Bandwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Bandwidth::Auto);
        }
        s.parse::<f64>()
            .map(Bandwidth::Fixed)
            .map_err(|_| Error::Parameter(format!("bandwidth must be `auto` or a number, got {s}")))
    }
}

/// Symmetric PSD similarity matrix with unit diagonal.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub entries: DMatrix<f64>,
    pub bandwidth: f64,
}

impl KernelMatrix {
    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    /// Principal submatrix on the given positions.
    pub fn restrict(&self, positions: &[usize]) -> KernelMatrix {
        let n = positions.len();
        KernelMatrix {
            entries: DMatrix::from_fn(n, n, |i, j| self.entries[(positions[i], positions[j])]),
            bandwidth: self.bandwidth,
        }
    }
}

/// `L[i][j] = exp(-|d_i - d_j|^2 / (2 bandwidth^2))`.
pub fn build_rbf_kernel(space: &ClassSpace, bandwidth: f64) -> Result<KernelMatrix> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Parameter(format!(
            "bandwidth must be positive and finite, got {bandwidth}"
        )));
    }
    let k = space.num_classes();
    let denom = 2.0 * bandwidth * bandwidth;
    let mut entries = DMatrix::from_element(k, k, 1.0);
    for i in 0..k {
        for j in i + 1..k {
            let v = (-space.sq_dist(i, j) / denom).exp();
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(KernelMatrix { entries, bandwidth })
}

/// Eigenpairs of a kernel; eigenvalues clamped at zero.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub eigenvalues: Vec<f64>,
    /// Column `n` is the eigenvector for `eigenvalues[n]`.
    pub eigenvectors: DMatrix<f64>,
}

impl EigenSystem {
    pub fn of(kernel: &KernelMatrix) -> Self {
        let eig = SymmetricEigen::new(kernel.entries.clone());
        let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let floor = max * RELATIVE_EIGEN_FLOOR;
        let eigenvalues = eig
            .eigenvalues
            .iter()
            .map(|&l| if l > floor { l } else { 0.0 })
            .collect();
        Self {
            eigenvalues,
            eigenvectors: eig.eigenvectors,
        }
    }

    pub fn positive_count(&self) -> usize {
        self.eigenvalues.iter().filter(|&&l| l > 0.0).count()
    }
}

/// `e[n][j]` = elementary symmetric polynomial of degree `j` in the first `n` eigenvalues.
pub fn elementary_symmetric_table(eigenvalues: &[f64], k: usize) -> Result<Vec<Vec<f64>>> {
    let n_total = eigenvalues.len();
    if k > n_total {
        return Err(Error::Parameter(format!(
            "subset size {k} exceeds {n_total} eigenvalues"
        )));
    }
    if let Some(bad) = eigenvalues.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::Input(format!("eigenvalues must be non-negative, got {bad}")));
    }
    let mut e = vec![vec![0.0; k + 1]; n_total + 1];
    for row in &mut e {
        row[0] = 1.0;
    }
    for n in 1..=n_total {
        let lambda = eigenvalues[n - 1];
        for j in 1..=k {
            e[n][j] = e[n - 1][j] + lambda * e[n - 1][j - 1];
        }
    }
    Ok(e)
}

/// Phase I: chooses which eigenvectors span the sample. Returns eigen-indices in descending order.
pub fn sample_eigenvector_subset<R: Rng + ?Sized>(eig: &EigenSystem, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let positive = eig.positive_count();
    if k > positive {
        return Err(Error::Spectral(format!(
            "need {k} positive eigenvalues, kernel has {positive}"
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    // Acceptance ratios are invariant to a common rescaling; normalising delays overflow.
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let scaled: Vec<f64> = eig.eigenvalues.iter().map(|l| l / max).collect();
    let e = elementary_symmetric_table(&scaled, k)?;
    let mut remaining = k;
    let mut chosen = Vec::with_capacity(k);
    for n in (1..=scaled.len()).rev() {
        if remaining == 0 {
            break;
        }
        let denom = e[n][remaining];
        let p = if denom > 0.0 {
            (scaled[n - 1] * e[n - 1][remaining - 1] / denom).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let u: f64 = rng.random();
        if u < p {
            chosen.push(n - 1);
            remaining -= 1;
        }
    }
    if remaining > 0 {
        return Err(Error::Spectral(format!(
            "eigenvector selection ended {remaining} short of {k}"
        )));
    }
    Ok(chosen)
}

/// Exact k-DPP draw; returns kernel positions (not class ids), in selection order.
pub fn sample_kdpp_positions<R: Rng + ?Sized>(kernel: &KernelMatrix, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = kernel.size();
    if k > n {
        return Err(Error::Parameter(format!("subset size {k} exceeds {n} items")));
    }
    let eig = EigenSystem::of(kernel);
    let chosen = sample_eigenvector_subset(&eig, k, rng)?;
    let mut basis: Vec<Vec<f64>> = chosen
        .iter()
        .map(|&c| eig.eigenvectors.column(c).iter().copied().collect())
        .collect();
    let mut picked = Vec::with_capacity(k);
    while !basis.is_empty() {
        let mut probs: Vec<f64> = (0..n).map(|i| basis.iter().map(|v| v[i] * v[i]).sum::<f64>()).collect();
        for &p in &picked {
            probs[p] = 0.0;
        }
        let total: f64 = probs.iter().sum();
        if !(total > 1e-12) {
            return Err(Error::Spectral(format!(
                "eigenvector basis collapsed after {} of {k} picks",
                picked.len()
            )));
        }
        let item = sample_index(&probs, total, rng);
        picked.push(item);
        basis = orthogonal_complement(basis, item);
    }
    Ok(picked)
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Orthonormal basis of `{v in span(basis) : v[axis] = 0}` (one dimension fewer).
fn orthogonal_complement(mut basis: Vec<Vec<f64>>, axis: usize) -> Vec<Vec<f64>> {
    let pivot = (0..basis.len())
        .max_by(|&a, &b| basis[a][axis].abs().total_cmp(&basis[b][axis].abs()))
        .expect("non-empty basis");
    let pv = basis.swap_remove(pivot);
    for v in &mut basis {
        let f = v[axis] / pv[axis];
        for (x, p) in v.iter_mut().zip(&pv) {
            *x -= f * p;
        }
        v[axis] = 0.0;
    }
    // modified Gram-Schmidt
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(basis.len());
    for mut v in basis {
        for q in &out {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(q) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

/// Exact k-DPP draw over the classes of `space` under `kernel`; returns class ids.
pub fn sample_kdpp<R: Rng + ?Sized>(
    space: &ClassSpace,
    kernel: &KernelMatrix,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if kernel.size() != space.num_classes() {
        return Err(Error::Input("kernel size does not match class space".into()));
    }
    Ok(sample_kdpp_positions(kernel, k, rng)?
        .into_iter()
        .map(|p| space.class_ids[p])
        .collect())
}

/// Disjoint class subsets covering a label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub subsets: Vec<Vec<usize>>,
    pub subset_size: usize,
}

impl ClassPartition {
    pub fn all_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.subsets.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids
    }
}

/// Repeated k-DPP draws on the remaining classes until fewer than `k` remain; the remainder
/// becomes a final, smaller subset. The kernel is built once and restricted each round.
pub fn hierarchical_partition<R: Rng + ?Sized>(
    space: &ClassSpace,
    k: usize,
    bandwidth: Bandwidth,
    rng: &mut R,
) -> Result<(ClassPartition, f64)> {
    let total = space.num_classes();
    if k == 0 || k > total {
        return Err(Error::Parameter(format!("subset size must be in 1..={total}, got {k}")));
    }
    let sigma = bandwidth.resolve(space)?;
    let kernel = build_rbf_kernel(space, sigma)?;
    let mut remaining: Vec<usize> = (0..total).collect();
    let mut subsets = Vec::new();
    while remaining.len() >= k {
        let local = kernel.restrict(&remaining);
        let picks = sample_kdpp_positions(&local, k, rng)?;
        let mut taken: Vec<usize> = picks.iter().map(|&p| remaining[p]).collect();
        taken.sort_unstable();
        subsets.push(taken.iter().map(|&p| space.class_ids[p]).collect());
        remaining.retain(|p| !taken.contains(p));
    }
    if !remaining.is_empty() {
        subsets.push(remaining.iter().map(|&p| space.class_ids[p]).collect());
    }
    Ok((
        ClassPartition {
            subsets,
            subset_size: k,
        },
        sigma,
    ))
}

/// Greedy "close" subset: the most cosine-similar pair, then repeatedly the class with the
/// highest mean similarity to those already chosen. Ties go to the lowest class id.
pub fn closest_subset(space: &ClassSpace, k: usize) -> Result<Vec<usize>> {
    let total = space.num_classes();
    if k == 0 || k > total {
        return Err(Error::Parameter(format!("subset size must be in 1..={total}, got {k}")));
    }
    // positions ordered by class id so ties resolve to the lowest id
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by_key(|&p| space.class_ids[p]);
    if total == 1 {
        return Ok(vec![space.class_ids[0]]);
    }
    let mut best = (order[0], order[1]);
    let mut best_sim = f64::NEG_INFINITY;
    for (a, &i) in order.iter().enumerate() {
        for &j in &order[a + 1..] {
            let s = space.cosine(i, j);
            if s > best_sim {
                best_sim = s;
                best = (i, j);
            }
        }
    }
    let mut chosen = vec![best.0];
    if k >= 2 {
        chosen.push(best.1);
    }
    while chosen.len() < k {
        let mut pick = None;
        let mut pick_score = f64::NEG_INFINITY;
        for &c in &order {
            if chosen.contains(&c) {
                continue;
            }
            let score = chosen.iter().map(|&s| space.cosine(c, s)).sum::<f64>() / chosen.len() as f64;
            if score > pick_score {
                pick_score = score;
                pick = Some(c);
            }
        }
        chosen.push(pick.expect("k <= K leaves a candidate"));
    }
    Ok(chosen.into_iter().map(|p| space.class_ids[p]).collect())
}

/// Mean pairwise cosine similarity of the subset's weight columns; 0 for a singleton.
pub fn subset_diversity_score(subset: &[usize], space: &ClassSpace) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Input("subset must be non-empty".into()));
    }
    let pos = subset
        .iter()
        .map(|&id| space.position(id))
        .collect::<Result<Vec<_>>>()?;
    if pos.len() == 1 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..pos.len() {
        for b in a + 1..pos.len() {
            sum += space.cosine(pos[a], pos[b]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// On-disk partition document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub k: usize,
    pub bandwidth: f64,
    pub bandwidth_mode: String,
    pub subsets: Vec<Vec<usize>>,
}

impl PartitionFile {
    pub const FORMAT: &'static str = "condattack-partition";
    pub const VERSION: u32 = 1;

    pub fn new(partition: &ClassPartition, seed: u64, bandwidth: f64, mode: Bandwidth) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            seed,
            k: partition.subset_size,
            bandwidth,
            bandwidth_mode: match mode {
                Bandwidth::Auto => "auto".into(),
                Bandwidth::Fixed(_) => "fixed".into(),
            },
            subsets: partition.subsets.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Self = serde_json::from_str(&text)?;
        if doc.format != Self::FORMAT || doc.version != Self::VERSION {
            return Err(Error::Input(format!(
                "{} is not a v{} partition file",
                path.display(),
                Self::VERSION
            )));
        }
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space2(cols: &[[f64; 2]]) -> ClassSpace {
        ClassSpace::from_columns(&cols.iter().map(|c| c.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rbf_kernel_known_entry_and_unit_diagonal() {
        let s = space2(&[[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let k = build_rbf_kernel(&s, 1.0).unwrap();
        for i in 0..3 {
            assert_eq!(k.entries[(i, i)], 1.0);
        }
        assert!((k.entries[(0, 1)] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((k.entries[(0, 1)] - 0.6065306597).abs() < 1e-9);
        assert_eq!(k.entries[(1, 2)], 1.0);
    }

    #[test]
    fn rbf_kernel_rejects_bad_inputs() {
        let s = space2(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(build_rbf_kernel(&s, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(build_rbf_kernel(&s, -1.0), Err(Error::Parameter(_))));
        let bad = ClassSpace::new(DMatrix::from_element(2, 2, f64::NAN), vec![0, 1]);
        assert!(matches!(bad, Err(Error::Input(_))));
        let dup = ClassSpace::new(DMatrix::zeros(2, 2), vec![3, 3]);
        assert!(matches!(dup, Err(Error::Input(_))));
    }

    #[test]
    fn esym_small_examples() {
        let e = elementary_symmetric_table(&[5.0], 1).unwrap();
        assert_eq!(e[1][1], 5.0);
        let e = elementary_symmetric_table(&[1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(e[3][1], 6.0);
        assert_eq!(e[3][2], 11.0);
        assert_eq!(e[3][3], 6.0);
        assert_eq!(e[0][1], 0.0);
        assert!(elementary_symmetric_table(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn phase_one_boundary_cases() {
        let eig = EigenSystem {
            eigenvalues: vec![0.5, 1.0, 2.0],
            eigenvectors: DMatrix::identity(3, 3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mut j = sample_eigenvector_subset(&eig, 3, &mut rng).unwrap();
            j.sort_unstable();
            assert_eq!(j, vec![0, 1, 2]);
        }
        assert!(sample_eigenvector_subset(&eig, 0, &mut rng).unwrap().is_empty());
        let deficient = EigenSystem {
            eigenvalues: vec![0.0, 1.0, 0.0],
            eigenvectors: DMatrix::identity(3, 3),
        };
        assert!(matches!(
            sample_eigenvector_subset(&deficient, 2, &mut rng),
            Err(Error::Spectral(_))
        ));
    }

    #[test]
    fn two_items_two_picks_is_certain() {
        let s = space2(&[[0.0, 0.0], [0.3, 0.1]]);
        let k = build_rbf_kernel(&s, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut got = sample_kdpp(&s, &k, 2, &mut rng).unwrap();
            got.sort_unstable();
            assert_eq!(got, vec![0, 1]);
        }
    }

    #[test]
    fn rank_deficient_kernel_is_a_spectral_error() {
        let s = space2(&[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]);
        let k = build_rbf_kernel(&s, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_kdpp(&s, &k, 2, &mut rng), Err(Error::Spectral(_))));
    }

    #[test]
    fn partition_structure_and_remainder() {
        let cols: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let s = ClassSpace::from_columns(&cols).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, _) = hierarchical_partition(&s, 2, Bandwidth::Auto, &mut rng).unwrap();
        assert_eq!(p.subsets.len(), 3);
        assert!(p.subsets.iter().all(|s| s.len() == 2));
        assert_eq!(p.all_ids(), (0..6).collect::<Vec<_>>());

        let s5 = ClassSpace::from_columns(&cols[..5]).unwrap();
        let (p, _) = hierarchical_partition(&s5, 2, Bandwidth::Auto, &mut rng).unwrap();
        let sizes: Vec<usize> = p.subsets.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert!(hierarchical_partition(&s5, 6, Bandwidth::Auto, &mut rng).is_err());
        assert!(hierarchical_partition(&s5, 0, Bandwidth::Auto, &mut rng).is_err());
    }

    #[test]
    fn partition_is_seed_deterministic() {
        let cols: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 * 0.05])
            .collect();
        let s = ClassSpace::from_columns(&cols).unwrap();
        let a = hierarchical_partition(&s, 4, Bandwidth::Auto, &mut ChaCha8Rng::seed_from_u64(8));
        let b = hierarchical_partition(&s, 4, Bandwidth::Auto, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn closest_subset_examples() {
        let s = space2(&[[1.0, 0.0], [0.0, 1.0], [0.3, 0.9], [0.3, 0.9]]);
        let mut pair = closest_subset(&s, 2).unwrap();
        pair.sort_unstable();
        assert_eq!(pair, vec![2, 3]);
        let mut all = closest_subset(&s, 4).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(closest_subset(&s, 5).is_err());
    }

    #[test]
    fn closest_subset_stays_in_planted_cluster() {
        // six clusters on the unit circle, three members each
        let mut cols = Vec::new();
        for c in 0..6 {
            let base = c as f64 * std::f64::consts::PI / 3.0;
            for m in 0..3 {
                let a = base + (m as f64 - 1.0) * 0.05;
                cols.push(vec![a.cos(), a.sin()]);
            }
        }
        let s = ClassSpace::from_columns(&cols).unwrap();
        let picks = closest_subset(&s, 3).unwrap();
        let cluster = picks[0] / 3;
        assert!(picks.iter().all(|p| p / 3 == cluster), "{picks:?}");
    }

    #[test]
    fn diversity_score_examples() {
        let s = space2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(subset_diversity_score(&[1], &s).unwrap(), 0.0);
        assert!((subset_diversity_score(&[0, 2], &s).unwrap() - 1.0).abs() < 1e-12);
        assert!(subset_diversity_score(&[0, 1], &s).unwrap().abs() < 1e-12);
        assert!(matches!(subset_diversity_score(&[7], &s), Err(Error::Input(_))));
    }

    #[test]
    fn partition_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = ClassPartition {
            subsets: vec![vec![0, 3], vec![1, 2]],
            subset_size: 2,
        };
        let doc = PartitionFile::new(&p, 42, 1.5, Bandwidth::Auto);
        doc.save(&path).unwrap();
        assert_eq!(PartitionFile::load(&path).unwrap(), doc);
    }
}
