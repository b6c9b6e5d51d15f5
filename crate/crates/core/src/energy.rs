//! Operation counting and the synaptic-operation energy model.
//!
//! Every spike-consuming kernel tallies accumulate operations (SOPs) into a
//! [`LayerRecord`]; every neuron layer tallies emission events. Float
//! multiply-accumulates are tallied separately and never priced.

use serde::{Deserialize, Serialize};

/// Energy of one synaptic accumulate, in joules (77 fJ).
pub const E_SOP_JOULES: f64 = 77e-15;
/// Energy of one spike emission, in joules (3.7 pJ).
pub const E_SIGN_JOULES: f64 = 3.7e-12;

/// Counts for a single layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: String,
    /// Accumulate operations driven by spikes (includes attention ACs).
    pub sop: u64,
    /// Timestep/neuron pairs with a nonzero emission.
    pub sign: u64,
    /// Float multiply-accumulates (not priced).
    pub mac: u64,
    /// Attention similarity-stage ACs (subset of `sop`).
    pub similarity_ac: u64,
    /// Attention aggregation-stage ACs actually performed (subset of `sop`).
    pub aggregation_ac: u64,
    /// Aggregation ACs the same attention map would cost without the mask.
    pub aggregation_ac_dense: u64,
}

impl LayerRecord {
    pub fn new(layer: impl Into<String>) -> Self {
        Self {
            layer: layer.into(),
            ..Self::default()
        }
    }

    fn absorb(&mut self, other: &LayerRecord) {
        self.sop += other.sop;
        self.sign += other.sign;
        self.mac += other.mac;
        self.similarity_ac += other.similarity_ac;
        self.aggregation_ac += other.aggregation_ac;
        self.aggregation_ac_dense += other.aggregation_ac_dense;
    }
}

/// Spike statistics of one attention layer, used for firing-rate reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionProbe {
    pub layer: String,
    pub tokens: usize,
    pub dim: usize,
    pub timesteps: usize,
    /// Sum of query spike values.
    pub q_spikes: u64,
    /// Sum of key spike values (burst levels count with multiplicity).
    pub k_spikes: u64,
    pub masked: bool,
    /// Number of nonzero mask entries (N² when unmasked).
    pub mask_nnz: u64,
}

impl AttentionProbe {
    fn neurons(&self) -> f64 {
        (self.tokens * self.dim * self.timesteps) as f64
    }

    /// Mean query spikes per neuron per timestep.
    pub fn rate_q(&self) -> f64 {
        self.q_spikes as f64 / self.neurons()
    }

    /// Mean key spikes per neuron per timestep.
    pub fn rate_k(&self) -> f64 {
        self.k_spikes as f64 / self.neurons()
    }
}

/// Per-layer operation counts accumulated over one or more forward passes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    records: Vec<LayerRecord>,
    probes: Vec<AttentionProbe>,
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the record for `layer`, creating it on first use.
    pub fn layer(&mut self, layer: &str) -> &mut LayerRecord {
        match self.records.iter().position(|r| r.layer == layer) {
            Some(i) => &mut self.records[i],
            None => {
                self.records.push(LayerRecord::new(layer));
                self.records.last_mut().expect("just pushed")
            }
        }
    }

    pub fn get(&self, layer: &str) -> Option<&LayerRecord> {
        self.records.iter().find(|r| r.layer == layer)
    }

    pub fn records(&self) -> &[LayerRecord] {
        &self.records
    }

    pub fn probes(&self) -> &[AttentionProbe] {
        &self.probes
    }

    pub fn push_probe(&mut self, probe: AttentionProbe) {
        self.probes.push(probe);
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_sop(&self) -> u64 {
        self.records.iter().map(|r| r.sop).sum()
    }

    pub fn total_sign(&self) -> u64 {
        self.records.iter().map(|r| r.sign).sum()
    }

    pub fn total_mac(&self) -> u64 {
        self.records.iter().map(|r| r.mac).sum()
    }

    pub fn total_similarity_ac(&self) -> u64 {
        self.records.iter().map(|r| r.similarity_ac).sum()
    }

    pub fn total_aggregation_ac(&self) -> u64 {
        self.records.iter().map(|r| r.aggregation_ac).sum()
    }

    pub fn total_aggregation_ac_dense(&self) -> u64 {
        self.records.iter().map(|r| r.aggregation_ac_dense).sum()
    }

    /// Adds `other` into `self` layer by layer. Merging is commutative in
    /// the totals; layer order follows first appearance.
    pub fn merge(&mut self, other: &EnergyLedger) {
        for rec in &other.records {
            self.layer(&rec.layer).absorb(rec);
        }
        self.probes.extend(other.probes.iter().cloned());
    }

    pub fn reset(&mut self) {
        self.records.clear();
        self.probes.clear();
    }
}

/// Total energy in joules: `N_SOP · E_SOP + N_Sign · E_Sign`.
pub fn estimate_energy(ledger: &EnergyLedger) -> f64 {
    energy_from_counts(ledger.total_sop() as f64, ledger.total_sign() as f64)
}

/// Energy in joules for raw operation counts.
pub fn energy_from_counts(sop: f64, sign: f64) -> f64 {
    sop * E_SOP_JOULES + sign * E_SIGN_JOULES
}

/// Converts joules to microjoules.
pub fn to_microjoules(joules: f64) -> f64 {
    joules * 1e6
}

/// Summary of the attention cost of one instrumented forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub layers: Vec<AttentionComplexity>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionComplexity {
    pub layer: String,
    pub tokens: usize,
    pub dim: usize,
    pub timesteps: usize,
    pub rate_q: f64,
    pub rate_k: f64,
    pub similarity_ac: u64,
    /// `R_Q · R_K · N² · d` per timestep, summed over timesteps and samples.
    pub similarity_ac_predicted: f64,
    pub aggregation_ac: u64,
    pub aggregation_ac_dense: u64,
    /// Measured masked/dense aggregation ratio.
    pub aggregation_ratio: f64,
    /// Mean neighbours per token divided by N (1.0 when unmasked).
    pub k_over_n: f64,
}

/// Builds a complexity report from an instrumented ledger. Probes of the
/// same layer (one per merged forward pass) are pooled, so rates are means
/// over every sample and timestep.
pub fn complexity_from_ledger(ledger: &EnergyLedger) -> ComplexityReport {
    let mut pooled: Vec<AttentionProbe> = Vec::new();
    for p in ledger.probes() {
        match pooled.iter_mut().find(|q| q.layer == p.layer) {
            Some(q) => {
                q.timesteps += p.timesteps;
                q.q_spikes += p.q_spikes;
                q.k_spikes += p.k_spikes;
            }
            None => pooled.push(p.clone()),
        }
    }
    let layers = pooled
        .iter()
        .map(|p| {
            let rec = ledger.get(&p.layer).cloned().unwrap_or_default();
            let n = p.tokens as f64;
            let predicted = p.rate_q() * p.rate_k() * n * n * p.dim as f64 * p.timesteps as f64;
            let ratio = if rec.aggregation_ac_dense == 0 {
                0.0
            } else {
                rec.aggregation_ac as f64 / rec.aggregation_ac_dense as f64
            };
            AttentionComplexity {
                layer: p.layer.clone(),
                tokens: p.tokens,
                dim: p.dim,
                timesteps: p.timesteps,
                rate_q: p.rate_q(),
                rate_k: p.rate_k(),
                similarity_ac: rec.similarity_ac,
                similarity_ac_predicted: predicted,
                aggregation_ac: rec.aggregation_ac,
                aggregation_ac_dense: rec.aggregation_ac_dense,
                aggregation_ratio: ratio,
                k_over_n: p.mask_nnz as f64 / (n * n),
            }
        })
        .collect();
    ComplexityReport { layers }
}
