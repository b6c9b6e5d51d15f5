//! Inference-time building blocks: patch splitting with relative position
//! embedding, the encoder block, the burst MLP and the classification head.
//!
//! Every block takes compiled (BN-folded, `f32`) weights, creates fresh
//! neuron state per call and writes its counts into an [`EnergyLedger`].
//! Tensors are time-major: `[T, ...]`.

use crate::attention::{
    dbssa_forward, project_qkv, AdjacencyMask, AttentionNeurons, AttentionParams, Projection,
};
use crate::energy::{AttentionProbe, EnergyLedger};
use crate::error::{Error, Result};
use crate::neuron::{NeuronKind, NeuronLayer, NeuronParams};
use crate::tensor::{add, add_channel_bias, conv2d_addonly, conv2d_counted, matmul_float, maxpool2, IntTensor, Tensor};

/// One conv → BN (folded) → neuron → optional max-pool stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StemStage {
    pub kernel: Tensor,
    pub bias: Vec<f32>,
    /// `None` leaves the stage output as membrane potential.
    pub neuron: Option<NeuronParams>,
    pub pool: bool,
}

/// Patch splitting stem plus relative position embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Bsps {
    pub stages: Vec<StemStage>,
    pub rpe_neuron: NeuronParams,
    pub rpe_kernel: Tensor,
    pub rpe_bias: Vec<f32>,
}

enum Signal {
    Float(Tensor),
    Spikes(IntTensor),
}

/// `[T, D, H', W']` maps to `[T, H'·W', D]` tokens.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (t, d, h, w) = x.dims4()?;
    let n = h * w;
    let src = x.data();
    let mut out = vec![0f32; t * n * d];
    for ti in 0..t {
        for c in 0..d {
            for p in 0..n {
                out[(ti * n + p) * d + c] = src[(ti * d + c) * n + p];
            }
        }
    }
    Tensor::new(&[t, n, d], out)
}

/// Runs the stem and position embedding on `[T, C, H, W]` input frames and
/// returns the token membrane potentials `U0 = H + BN(conv(SN(H)))` as
/// `[T, N, D]` together with the patch grid.
pub fn bsps_forward(bsps: &Bsps, x: &Tensor, ledger: &mut EnergyLedger) -> Result<(Tensor, (usize, usize))> {
    let (_, _, h, w) = x.dims4()?;
    let stride = 1usize << bsps.stages.iter().filter(|s| s.pool).count();
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::dim(format!("{h}x{w} input is not divisible by stem stride {stride}")));
    }
    let mut cur = Signal::Float(x.clone());
    for (i, st) in bsps.stages.iter().enumerate() {
        let rec = ledger.layer(&format!("stem.{i}"));
        let mut y = match &cur {
            Signal::Float(f) => conv2d_counted(f, &st.kernel, 1, 1, rec)?,
            Signal::Spikes(s) => conv2d_addonly(s, &st.kernel, 1, 1, rec)?,
        };
        add_channel_bias(&mut y, &st.bias, 1)?;
        cur = match st.neuron {
            Some(p) => {
                let s = NeuronLayer::burst(p).run_sequence(&y, rec)?;
                Signal::Spikes(if st.pool { maxpool2(&s)? } else { s })
            }
            None => Signal::Float(if st.pool { maxpool2(&y)? } else { y }),
        };
    }
    let Signal::Float(hmap) = cur else {
        return Err(Error::Contract("last stem stage must emit membrane potential".to_string()));
    };
    let (_, _, gh, gw) = hmap.dims4()?;
    let rec = ledger.layer("rpe");
    let s = NeuronLayer::burst(bsps.rpe_neuron).run_sequence(&hmap, rec)?;
    let mut pe = conv2d_addonly(&s, &bsps.rpe_kernel, 1, 1, rec)?;
    add_channel_bias(&mut pe, &bsps.rpe_bias, 1)?;
    let u0 = add(&hmap, &pe)?;
    Ok((to_tokens(&u0)?, (gh, gw)))
}

/// Two-layer burst MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Bmlp {
    pub fc1: Projection,
    pub neuron: NeuronParams,
    pub fc2: Projection,
}

impl Bmlp {
    pub fn hidden(&self) -> usize {
        self.fc1.bias.len()
    }
}

/// `fc2(SN(fc1(s)))`, returning the membrane contribution `[T, N, D]`.
pub fn bmlp_forward(mlp: &Bmlp, s: &IntTensor, ledger: &mut EnergyLedger, prefix: &str) -> Result<Tensor> {
    let rec = ledger.layer(&format!("{prefix}.fc1"));
    let hidden = mlp.fc1.apply(s, rec)?;
    let spikes = NeuronLayer::burst(mlp.neuron).run_sequence(&hidden, rec)?;
    mlp.fc2.apply(&spikes, ledger.layer(&format!("{prefix}.fc2")))
}

/// Compiled encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub name: String,
    pub attn: AttentionParams,
    pub q_neuron: NeuronParams,
    pub k_neuron: NeuronParams,
    pub k_kind: NeuronKind,
    pub vp_neuron: NeuronParams,
    pub vm_neuron: NeuronParams,
    pub out_neuron: NeuronParams,
    pub proj: Projection,
    pub res1: NeuronParams,
    pub mlp: Bmlp,
    pub res2: NeuronParams,
    pub mask: Option<AdjacencyMask>,
}

/// One encoder block:
///
/// ```text
/// U'  = proj(DBSSA(S_prev)) + U_prev
/// S'  = SN(U')
/// U_l = BMLP(S') + U'
/// S_l = SN(U_l)
/// ```
///
/// Returns `(S_l, U_l)`.
pub fn encoder_block_forward(
    block: &EncoderBlock,
    s_prev: &IntTensor,
    u_prev: &Tensor,
    ledger: &mut EnergyLedger,
) -> Result<(IntTensor, Tensor)> {
    if s_prev.shape() != u_prev.shape() || s_prev.rank() != 3 {
        return Err(Error::dim(format!(
            "block inputs must share a [T, N, D] shape, got {:?} and {:?}",
            s_prev.shape(),
            u_prev.shape()
        )));
    }
    let name = &block.name;
    let mut neurons = AttentionNeurons {
        q: NeuronLayer::binary(block.q_neuron),
        k: NeuronLayer::new(block.k_kind, block.k_neuron),
        vp: NeuronLayer::binary(block.vp_neuron),
        vm: NeuronLayer::binary(block.vm_neuron),
        out: NeuronLayer::burst(block.out_neuron),
    };
    let attn_prefix = format!("{name}.attn");
    let proj = project_qkv(s_prev, &block.attn, &mut neurons, ledger, &attn_prefix)?;
    let core = format!("{attn_prefix}.core");
    ledger.push_probe(AttentionProbe::from_spikes(&core, &proj, block.mask.as_ref()));
    let a = dbssa_forward(
        &proj,
        block.mask.as_ref(),
        block.attn.heads,
        block.attn.scale_s,
        &mut neurons.out,
        ledger.layer(&core),
    )?;
    let z = block.proj.apply(&a, ledger.layer(&format!("{attn_prefix}.proj")))?;
    let u_mid = add(&z, u_prev)?;
    let s_mid = NeuronLayer::burst(block.res1).run_sequence(&u_mid, ledger.layer(&format!("{name}.res1")))?;
    let m = bmlp_forward(&block.mlp, &s_mid, ledger, &format!("{name}.mlp"))?;
    let u = add(&m, &u_mid)?;
    let s = NeuronLayer::burst(block.res2).run_sequence(&u, ledger.layer(&format!("{name}.res2")))?;
    Ok((s, u))
}

/// Linear classifier on pooled spike counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `[D, classes]`.
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

/// Mean over tokens, linear layer per timestep, mean over time. Float MACs
/// are tallied under `head`.
pub fn classification_head(head: &Head, s: &IntTensor, ledger: &mut EnergyLedger) -> Result<Tensor> {
    let [t, n, d] = s.shape()[..] else {
        return Err(Error::dim(format!("head input must be [T, N, D], got {:?}", s.shape())));
    };
    let (wd, classes) = head.weight.dims2()?;
    if wd != d || head.bias.len() != classes {
        return Err(Error::dim(format!(
            "head weight {:?} / bias {} do not fit D = {d}",
            head.weight.shape(),
            head.bias.len()
        )));
    }
    let mut gap = vec![0f64; t * d];
    for ti in 0..t {
        for p in 0..n {
            for c in 0..d {
                gap[ti * d + c] += s.data()[(ti * n + p) * d + c] as f64;
            }
        }
    }
    let gap = Tensor::new(&[t, d], gap.into_iter().map(|v| (v / n as f64) as f32).collect())?;
    let mut logits = matmul_float(&gap, &head.weight)?;
    add_channel_bias(&mut logits, &head.bias, 1)?;
    ledger.layer("head").mac += (t * d * classes) as u64;
    let mut out = vec![0f64; classes];
    for row in logits.data().chunks(classes) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v as f64);
    }
    Tensor::new(&[classes], out.into_iter().map(|v| (v / t as f64) as f32).collect())
}
