use crate::error::{Error, Result};
use crate::nn::ModelParams;

use super::protocol::ClientUpdate;

/// Example-weighted mean of client weights, `Σ (nᵢ/Σn) wᵢ`.
///
/// Evaluated as a running mean in client-id order, `m += (nᵢ/Σ_{j≤i} nⱼ)(wᵢ - m)`,
/// so a single update and a set of identical updates come back bit-exact.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ModelParams> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Aggregation("no client updates".into()))?;
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::Aggregation(format!(
                "duplicate update from client {}",
                pair[0].client_id
            )));
        }
    }
    for u in &sorted {
        if u.round != first.round {
            return Err(Error::Aggregation(format!(
                "client {} sent round {}, expected {}",
                u.client_id, u.round, first.round
            )));
        }
        if !u.weights.same_shape(&first.weights) {
            return Err(Error::Aggregation(format!(
                "client {} weights have a different shape",
                u.client_id
            )));
        }
    }
    let total: u64 = sorted.iter().map(|u| u64::from(u.num_examples)).sum();
    if total == 0 {
        return Err(Error::Aggregation("total example count is zero".into()));
    }

    let mut mean: Option<ModelParams> = None;
    let mut seen = 0u64;
    for u in sorted.into_iter().filter(|u| u.num_examples > 0) {
        seen += u64::from(u.num_examples);
        match &mut mean {
            None => mean = Some(u.weights.clone()),
            Some(m) => {
                let c = f64::from(u.num_examples) / seen as f64;
                for (mv, w) in m.values_mut().zip(u.weights.values()) {
                    *mv += c * (w - *mv);
                }
            }
        }
    }
    Ok(mean.expect("total > 0 implies a contributing update"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::protocol::Metrics;

    fn update(id: u32, n: u32, w: &[f64]) -> ClientUpdate {
        let mut p = ModelParams::zeros(&[w.len(), 1]);
        p.layers[0].weights.as_mut_slice().copy_from_slice(w);
        ClientUpdate {
            client_id: id,
            round: 1,
            num_examples: n,
            metrics: Metrics::new(),
            weights: p,
        }
    }

    fn weights(p: &ModelParams) -> Vec<f64> {
        p.layers[0].weights.as_slice().to_vec()
    }

    #[test]
    fn examples() {
        let single = update(0, 7, &[0.1, -0.3]);
        assert_eq!(
            fedavg_aggregate(std::slice::from_ref(&single)).unwrap(),
            single.weights
        );

        let two = [update(0, 5, &[1.0, 2.0]), update(1, 5, &[3.0, 4.0])];
        assert_eq!(weights(&fedavg_aggregate(&two).unwrap()), vec![2.0, 3.0]);

        let skew = [update(0, 1, &[0.0]), update(1, 3, &[4.0])];
        assert_eq!(weights(&fedavg_aggregate(&skew).unwrap()), vec![3.0]);
    }

    #[test]
    fn identical_updates_are_exact() {
        let w = [0.1, 1.0 / 3.0, -7.25e-9];
        let ups = [update(2, 10, &w), update(0, 10, &w), update(1, 10, &w)];
        assert_eq!(weights(&fedavg_aggregate(&ups).unwrap()), w.to_vec());
    }

    #[test]
    fn zero_example_clients_are_ignored() {
        let ups = [update(0, 0, &[100.0]), update(1, 2, &[1.0])];
        assert_eq!(weights(&fedavg_aggregate(&ups).unwrap()), vec![1.0]);
    }

    #[test]
    fn errors() {
        assert!(fedavg_aggregate(&[]).is_err());
        assert!(fedavg_aggregate(&[update(0, 0, &[1.0])]).is_err());
        assert!(fedavg_aggregate(&[update(0, 1, &[1.0]), update(1, 1, &[1.0, 2.0])]).is_err());
        assert!(fedavg_aggregate(&[update(0, 1, &[1.0]), update(0, 1, &[1.0])]).is_err());
        let mut late = update(1, 1, &[1.0]);
        late.round = 2;
        assert!(fedavg_aggregate(&[update(0, 1, &[1.0]), late]).is_err());
    }
}
