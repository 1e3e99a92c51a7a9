//! Synthetic data, non-IID client partitioning and CSV import.

use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Row-major labeled samples. Also used as a minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::invalid(
                "dataset needs dim >= 1 and at least one class",
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::LengthMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels,
        }
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "cannot append {}-dim samples to {}-dim dataset",
                other.dim, self.dim
            )));
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        self.num_classes = self.num_classes.max(other.num_classes);
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Reads `label,f_0,...,f_{dim-1}` with a header row.
    pub fn from_csv<R: Read>(reader: R, num_classes: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .quoting(false)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.is_empty() || header.get(0) != Some("label") {
            return Err(Error::invalid("csv header must start with `label`"));
        }
        let dim = header.len() - 1;
        for (k, name) in header.iter().skip(1).enumerate() {
            if name != format!("f_{k}") {
                return Err(Error::invalid(format!(
                    "csv column {} should be f_{k}, got {name}",
                    k + 1
                )));
            }
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_err =
                |what: &str| Error::invalid(format!("csv row {}: bad {what}", line + 2));
            labels.push(
                rec[0]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| parse_err("label"))?,
            );
            for field in rec.iter().skip(1) {
                features.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| parse_err("feature"))?,
                );
            }
        }
        Self::new(dim, num_classes, features, labels)
    }
}

/// Gaussian mixture: sample `i` has class `i % classes`, centered at
/// `spread * (e_c - 1/C)` on the first `classes` coordinates, unit covariance.
pub fn gen_synthetic(
    classes: usize,
    dim: usize,
    n: usize,
    seed: u64,
    spread: f64,
) -> Result<Dataset> {
    if classes < 2 || n < classes || dim < classes {
        return Err(Error::invalid(format!(
            "synthetic data needs classes >= 2, n >= classes and dim >= classes \
             (classes={classes}, dim={dim}, n={n})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!(
            "spread {spread} must be finite and >= 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = 1.0 / classes as f64;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for k in 0..dim {
            let center = if k < classes {
                spread * (if k == c { 1.0 } else { 0.0 } - shift)
            } else {
                0.0
            };
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(center + noise);
        }
        labels.push(c);
    }
    Dataset::new(dim, classes, features, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Indices into the source dataset.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

const PARTITION_RETRIES: usize = 100;
const TEST_FRACTION: f64 = 0.2;

/// Per-class Dirichlet(α) proportions across `num_clients`, rounded by
/// largest remainder, then an 80/20 train/test split per client.
pub fn dirichlet_partition(
    data: &Dataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha {alpha} must be positive")));
    }
    if data.len() < num_clients {
        return Err(Error::invalid(format!(
            "{} samples cannot cover {num_clients} clients",
            data.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for i in 0..data.len() {
        by_class[data.label(i)].push(i);
    }

    for _ in 0..PARTITION_RETRIES {
        let mut owned: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let props = dirichlet_draw(&gamma, num_clients, &mut rng);
            let counts = largest_remainder(&props, members.len());
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let mut cursor = 0;
            for (client, &c) in counts.iter().enumerate() {
                owned[client].extend_from_slice(&shuffled[cursor..cursor + c]);
                cursor += c;
            }
        }
        if owned.iter().any(|o| o.is_empty()) {
            continue;
        }
        return Ok(owned
            .into_iter()
            .enumerate()
            .map(|(id, mut idx)| {
                idx.shuffle(&mut rng);
                let n_test = (idx.len() as f64 * TEST_FRACTION).floor() as usize;
                let test_indices = idx[..n_test].to_vec();
                let train_indices = idx[n_test..].to_vec();
                ClientDataset {
                    id,
                    train: data.subset(&train_indices),
                    test: data.subset(&test_indices),
                    train_indices,
                    test_indices,
                }
            })
            .collect());
    }
    Err(Error::PartitionRetriesExhausted(PARTITION_RETRIES))
}

fn dirichlet_draw(gamma: &Gamma<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Integer counts summing to `total`, closest to `props * total`; leftover
/// units go to the largest fractional parts, ties to the smaller index.
pub(crate) fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let targets: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Union of every client's test split.
pub fn global_test(clients: &[ClientDataset]) -> Result<Dataset> {
    let first = clients
        .first()
        .ok_or_else(|| Error::invalid("no clients to collect test data from"))?;
    let mut all = Dataset::empty(first.test.dim(), first.test.num_classes());
    for c in clients {
        all.extend(&c.test)?;
    }
    Ok(all)
}
