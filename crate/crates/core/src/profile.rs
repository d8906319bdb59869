//! Parameter, FLOP and memory accounting from a recorded forward pass.
//!
//! Costs are read off the tape, so whatever the model actually executes is
//! what gets counted. Nodes are grouped into layers by their label.
//!
//! Headline GFLOPs = (conv/linear MACs + 4 ops per element of every affine
//! normalization) / 1e9. Conv and transposed conv cost `out_numel·C_in·k²`
//! MACs, matmul `out_numel·K`; biases are free. Activations, pooling,
//! upsampling and elementwise adds are itemized but not in the headline.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::autograd::{NodeInfo, OpKind, Tape};
use crate::model::{ModelError, Network};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Ops per element charged for an affine normalization (normalize + scale/shift).
pub const NORM_OPS_PER_ELEMENT: u64 = 4;
pub const BYTES_PER_VALUE: u64 = 4;
pub const CONVENTION: &str = "headline = (MACs + 4 ops/element per affine norm) / 1e9; MAC = 1 op";

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("node {id} (`{label}`): {kind:?} is not a network layer")]
    Unsupported { id: usize, label: String, kind: OpKind },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub norm_ops: u64,
    /// Activation, pooling, upsampling and add element counts.
    pub elementwise_ops: u64,
    /// Bytes of all values this layer produces.
    pub output_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub input_shape: Vec<usize>,
    pub total_params: u64,
    pub per_layer: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_norm_ops: u64,
    pub total_elementwise_ops: u64,
    /// Headline number, see [`CONVENTION`].
    pub gflops: f64,
    pub gflops_mac: f64,
    pub gflops_2mac: f64,
    pub param_bytes: u64,
    pub peak_activation_bytes: u64,
}

impl CostReport {
    /// `param_bytes + peak_activation_bytes`.
    pub fn memory_bytes(&self) -> u64 {
        self.param_bytes + self.peak_activation_bytes
    }
}

fn node_cost(n: &NodeInfo, out_numel: u64) -> Result<(u64, u64, u64), ProfileError> {
    Ok(match &n.kind {
        OpKind::Matmul { k } => (out_numel * *k as u64, 0, 0),
        OpKind::Conv2d { c_in, k } | OpKind::ConvTranspose2d { c_in, k } => (out_numel * (*c_in * k * k) as u64, 0, 0),
        OpKind::LayerNorm | OpKind::BatchNorm { .. } => (0, NORM_OPS_PER_ELEMENT * out_numel, 0),
        OpKind::LeakyRelu | OpKind::Sigmoid | OpKind::MaxPool2d | OpKind::Upsample | OpKind::Add | OpKind::Mul | OpKind::Scale => {
            (0, 0, out_numel)
        }
        OpKind::Leaf | OpKind::Reshape | OpKind::Transpose | OpKind::Concat | OpKind::AddBias => (0, 0, 0),
        kind @ (OpKind::Sum | OpKind::Mean | OpKind::Bce | OpKind::Dice { .. } | OpKind::WeightedSum) => {
            return Err(ProfileError::Unsupported {
                id: n.id,
                label: n.label.clone(),
                kind: kind.clone(),
            })
        }
    })
}

/// Peak live bytes when nodes run in tape order and each buffer is freed
/// right after its last consumer. Parameter leaves are excluded.
fn peak_activation_bytes(nodes: &[NodeInfo]) -> u64 {
    let mut last_use: Vec<usize> = (0..nodes.len()).collect();
    for n in nodes {
        for &i in &n.inputs {
            last_use[i] = last_use[i].max(n.id);
        }
    }
    let bytes = |n: &NodeInfo| n.shape.iter().product::<usize>() as u64 * BYTES_PER_VALUE;
    let mut frees: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for n in nodes {
        // outputs nobody consumes stay live to the end
        if last_use[n.id] > n.id {
            frees[last_use[n.id]].push(n.id);
        }
    }
    let (mut live, mut peak) = (0u64, 0u64);
    for n in nodes {
        if n.param.is_none() {
            live += bytes(n);
        }
        peak = peak.max(live);
        for &f in &frees[n.id] {
            if nodes[f].param.is_none() {
                live -= bytes(&nodes[f]);
            }
        }
    }
    peak
}

/// Cost of everything recorded on `tape`; parameter leaves are resolved in `store`.
pub fn cost_report<T: Scalar>(tape: &Tape<T>, store: &ParamStore<T>, input_shape: &[usize]) -> Result<CostReport, ProfileError> {
    let nodes = tape.nodes();
    let mut order: Vec<String> = Vec::new();
    let mut layers: HashMap<String, LayerCost> = HashMap::new();
    let mut seen_params = HashSet::new();
    for n in &nodes {
        let name = if n.label.is_empty() { "input".to_string() } else { n.label.clone() };
        let layer = layers.entry(name.clone()).or_insert_with(|| {
            order.push(name.clone());
            LayerCost {
                name,
                ..Default::default()
            }
        });
        let numel = n.shape.iter().product::<usize>() as u64;
        if let Some(pid) = n.param {
            let e = store.get(pid);
            if e.kind.learnable() && seen_params.insert(pid) {
                layer.params += numel;
            }
            continue;
        }
        let (macs, norm, elem) = node_cost(n, numel)?;
        layer.macs += macs;
        layer.norm_ops += norm;
        layer.elementwise_ops += elem;
        layer.output_bytes += numel * BYTES_PER_VALUE;
    }
    let per_layer: Vec<LayerCost> = order.iter().map(|n| layers.remove(n).expect("registered")).collect();
    let total_params: u64 = per_layer.iter().map(|l| l.params).sum();
    let total_macs: u64 = per_layer.iter().map(|l| l.macs).sum();
    let total_norm_ops: u64 = per_layer.iter().map(|l| l.norm_ops).sum();
    let total_elementwise_ops = per_layer.iter().map(|l| l.elementwise_ops).sum();
    Ok(CostReport {
        input_shape: input_shape.to_vec(),
        total_params,
        per_layer,
        total_macs,
        total_norm_ops,
        total_elementwise_ops,
        gflops: (total_macs + total_norm_ops) as f64 / 1e9,
        gflops_mac: total_macs as f64 / 1e9,
        gflops_2mac: 2.0 * total_macs as f64 / 1e9,
        param_bytes: total_params * BYTES_PER_VALUE,
        peak_activation_bytes: peak_activation_bytes(&nodes),
    })
}

/// Profile one eval-mode forward of `net` on a zero input of `input_shape`.
/// Running statistics are left untouched.
pub fn profile_network<T: Scalar>(net: &Network<T>, input_shape: &[usize]) -> Result<CostReport, ProfileError> {
    let mut net = net.clone();
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(input_shape)).map_err(ModelError::from)?;
    net.forward(&tape, x, Mode::Eval)?;
    cost_report(&tape, net.params(), input_shape)
}

impl CostReport {
    /// Per-layer rows followed by a `total` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ProfileError> {
        let mut w = csv::Writer::from_writer(out);
        for l in &self.per_layer {
            w.serialize(l)?;
        }
        w.serialize(LayerCost {
            name: "total".into(),
            params: self.total_params,
            macs: self.total_macs,
            norm_ops: self.total_norm_ops,
            elementwise_ops: self.total_elementwise_ops,
            output_bytes: self.per_layer.iter().map(|l| l.output_bytes).sum(),
        })?;
        w.flush()?;
        Ok(())
    }

    /// Aligned table plus summary. With `target = (params, gflops)` the
    /// deviation from the reference figures is printed too.
    pub fn render_text(&self, target: Option<(u64, f64)>) -> String {
        let w = self.per_layer.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$} {:>9} {:>12} {:>10} {:>10}", "layer", "params", "MACs", "norm_ops", "elem_ops");
        for l in &self.per_layer {
            let _ = writeln!(s, "{:<w$} {:>9} {:>12} {:>10} {:>10}", l.name, l.params, l.macs, l.norm_ops, l.elementwise_ops);
        }
        let _ = writeln!(
            s,
            "{:<w$} {:>9} {:>12} {:>10} {:>10}",
            "total", self.total_params, self.total_macs, self.total_norm_ops, self.total_elementwise_ops
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "input shape          {:?}", self.input_shape);
        let _ = writeln!(s, "params               {}", self.total_params);
        let _ = writeln!(s, "GFLOPs               {:.4}", self.gflops);
        let _ = writeln!(s, "GFLOPs (1 MAC = 1)   {:.4}", self.gflops_mac);
        let _ = writeln!(s, "GFLOPs (1 MAC = 2)   {:.4}", self.gflops_2mac);
        let _ = writeln!(s, "convention           {CONVENTION}");
        let _ = writeln!(s, "param bytes          {}", self.param_bytes);
        let _ = writeln!(s, "peak activation      {} bytes", self.peak_activation_bytes);
        let _ = writeln!(s, "memory estimate      {:.4} MB", self.memory_bytes() as f64 / 1e6);
        if let Some((p, g)) = target {
            let dp = self.total_params as i64 - p as i64;
            let _ = writeln!(
                s,
                "vs reference         params {:+} ({:+.3}%), GFLOPs {:+.4} ({:+.2}%)",
                dp,
                100.0 * dp as f64 / p as f64,
                self.gflops - g,
                100.0 * (self.gflops - g) / g
            );
        }
        s
    }
}
