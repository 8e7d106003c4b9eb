//! IID and Dirichlet label-skew partitioning with per-client 80:20 splits.

use rand::seq::SliceRandom;
use rand_distr::{weighted::WeightedIndex, Distribution, Gamma};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::scalar::Scalar;

/// One client's share of the pool, split into train and validation rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl ClientSplit {
    /// Shuffle and hold out `floor(n / 5)` rows for validation.
    fn new(mut indices: Vec<usize>, rng: &mut Rng) -> Self {
        indices.shuffle(rng);
        let val_len = indices.len() / 5;
        let val = indices.split_off(indices.len() - val_len);
        Self {
            train: indices,
            val,
        }
    }

    pub fn all(&self) -> Vec<usize> {
        let mut all = self.train.clone();
        all.extend_from_slice(&self.val);
        all
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<ClientSplit>,
}

impl Partition {
    fn from_assignment(assignment: Vec<Vec<usize>>, rng: &mut Rng) -> Self {
        Self {
            clients: assignment
                .into_iter()
                .map(|idx| ClientSplit::new(idx, rng))
                .collect(),
        }
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client_indices(&self, client: usize) -> Vec<usize> {
        self.clients[client].all()
    }
}

fn check_sizes(n: usize, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if n < clients {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot cover {clients} clients"
        )));
    }
    Ok(())
}

/// Random permutation cut into `clients` chunks whose sizes differ by at most one.
pub fn iid_partition<T: Scalar>(dataset: &Dataset<T>, clients: usize, seed: u64) -> Result<Partition> {
    let n = dataset.len();
    check_sizes(n, clients)?;
    let mut rng = rng::derive(seed, Stream::Partition, &[0]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (base, extra) = (n / clients, n % clients);
    let mut assignment = Vec::with_capacity(clients);
    let mut start = 0;
    for c in 0..clients {
        let len = base + usize::from(c < extra);
        assignment.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(Partition::from_assignment(assignment, &mut rng))
}

/// Per class, draw client shares `p ~ Dir(beta)` and assign each sample of
/// the class to a client drawn from `p`. Clients left empty receive one
/// sample taken from the currently largest client.
pub fn dirichlet_partition<T: Scalar>(
    dataset: &Dataset<T>,
    clients: usize,
    beta: f64,
    seed: u64,
) -> Result<Partition> {
    let n = dataset.len();
    check_sizes(n, clients)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument("dirichlet beta must be positive".into()));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = rng::derive(seed, Stream::Partition, &[1]);
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); clients];

    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = (0..n).filter(|&i| dataset.labels()[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let shares: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let picker = match WeightedIndex::new(&shares) {
            Ok(w) => w,
            // every share underflowed to zero: fall back to uniform
            Err(_) => WeightedIndex::new(vec![1.0; clients]).expect("uniform weights"),
        };
        for i in members {
            assignment[picker.sample(&mut rng)].push(i);
        }
    }

    while let Some(empty) = assignment.iter().position(Vec::is_empty) {
        let largest = (0..clients)
            .max_by_key(|&c| (assignment[c].len(), std::cmp::Reverse(c)))
            .expect("clients > 0");
        let moved = assignment[largest].pop().expect("n >= clients");
        assignment[empty].push(moved);
    }
    Ok(Partition::from_assignment(assignment, &mut rng))
}
