use std::collections::BTreeMap;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::params::{LayerId, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClientProfile {
    pub client_id: usize,
    /// Fixed for the whole experiment.
    pub tier: usize,
}

/// Assigns tiers in client-id order: the first `tier_counts[0]` clients are
/// tier 1, and so on.
pub fn assign_tiers(tier_counts: &[usize]) -> Vec<ClientProfile> {
    tier_counts
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| std::iter::repeat_n(t + 1, n))
        .enumerate()
        .map(|(client_id, tier)| ClientProfile { client_id, tier })
        .collect()
}

/// Stratified selection of `total` clients.
///
/// The quota is split evenly across the tiers present in `profiles`; the
/// remainder goes to tiers in round-robin order starting at `round`, and
/// quota a tier cannot fill passes to the next tier with room. Clients are
/// drawn uniformly without replacement within each tier. Returns client ids
/// in ascending order.
pub fn select_stratified(profiles: &[ClientProfile], total: usize, round: usize, seed: u64) -> Vec<usize> {
    let mut tiers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in profiles {
        tiers.entry(p.tier).or_default().push(p.client_id);
    }
    let groups: Vec<(usize, Vec<usize>)> = tiers.into_iter().collect();
    let g = groups.len();
    if g == 0 {
        return Vec::new();
    }
    let total = total.min(profiles.len());
    let mut quota = vec![total / g; g];
    for j in 0..total % g {
        quota[(round + j) % g] += 1;
    }
    let mut spill = 0;
    for (q, (_, members)) in quota.iter_mut().zip(&groups) {
        if *q > members.len() {
            spill += *q - members.len();
            *q = members.len();
        }
    }
    let mut j = round % g;
    while spill > 0 {
        if quota[j] < groups[j].1.len() {
            quota[j] += 1;
            spill -= 1;
        }
        j = (j + 1) % g;
    }
    let mut chosen = Vec::with_capacity(total);
    for ((tier, members), &q) in groups.iter().zip(&quota) {
        let mut rng = rng::stream(seed, "select", round as u64, *tier as u64);
        chosen.extend(index::sample(&mut rng, members.len(), q).into_iter().map(|i| members[i]));
    }
    chosen.sort_unstable();
    chosen
}

/// [`select_stratified`] with `floor(fraction * n)` clients.
pub fn select_clients(profiles: &[ClientProfile], fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let total = super::config::selection_size(fraction, profiles.len());
    select_stratified(profiles, total, round, seed)
}

/// One client's contribution to a round.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Tier of the subnetwork the client trained.
    pub tier: usize,
    pub n_samples: usize,
    /// Locally trained parameters (the tier's key set).
    pub params: ParamSet,
    /// Server-generated tensors for layers the client does not hold.
    pub generated: ParamSet,
}

#[derive(Clone, Debug)]
pub struct Aggregation {
    pub params: ParamSet,
    /// Number of clients that contributed to each layer.
    pub contributors: BTreeMap<LayerId, usize>,
}

/// Sample-weighted mean per layer over every client that holds it, real or
/// generated. Layers nobody holds keep their value from `global`. Clients
/// are summed in ascending id order.
pub fn aggregate(global: &ParamSet, updates: &[ClientUpdate]) -> Result<Aggregation> {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    for u in &order {
        if let Some(id) = u.generated.keys().find(|id| u.params.contains(id)) {
            return Err(Error::InvalidArgument(format!(
                "client {} supplies both a trained and a generated {id}",
                u.client_id
            )));
        }
        if let Some(id) = u.params.keys().chain(u.generated.keys()).find(|id| !global.contains(id)) {
            return Err(Error::MissingParam(*id));
        }
    }
    let mut params = ParamSet::new();
    let mut contributors = BTreeMap::new();
    for (id, current) in global.iter() {
        let mut acc: Option<Vec<f64>> = None;
        let mut weight = 0usize;
        let mut count = 0usize;
        for u in &order {
            let Some(t) = u.params.get(id).or_else(|| u.generated.get(id)) else {
                continue;
            };
            if t.shape() != current.shape() {
                return Err(Error::ShapeMismatch {
                    layer: format!("{id} from client {}", u.client_id),
                    expected: current.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            let w = u.n_samples as f64;
            let sum = acc.get_or_insert_with(|| vec![0.0; t.len()]);
            for (s, v) in sum.iter_mut().zip(t.data()) {
                *s += w * v;
            }
            weight += u.n_samples;
            count += 1;
        }
        let merged = match acc {
            Some(mut sum) if weight > 0 => {
                let inv = weight as f64;
                sum.iter_mut().for_each(|s| *s /= inv);
                Tensor::new(current.shape().to_vec(), sum)?
            }
            _ => current.clone(),
        };
        params.insert(*id, merged);
        contributors.insert(*id, count);
    }
    Ok(Aggregation { params, contributors })
}
