//! Actor and critic networks.
//!
//! Each tower is a stack of 3D convolutions over the (frame, row, column)
//! volume of stacked observations, followed by a ReLU MLP. The actor emits
//! eight logits; the critic concatenates the previous action to its input
//! and emits one state value. Convolutions run as im2col + GEMM and every
//! backward pass is written out by hand.
//!
//! Towers are generic over the float type so the same code can be checked
//! against finite differences in double precision; training uses `f32`.

mod checkpoint;
mod dist;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dist::MaskedCategorical;

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abacus::{Action, ObservationStack, NUM_ACTIONS, OBS_CHANNELS, OBS_COLS, OBS_LEN, OBS_ROWS, STACK_DEPTH};
use crate::env::{SymbolInput, SYMBOL_LEN};
use crate::error::{Error, Result};

pub trait Real: Float + FromPrimitive + LinalgScalar + ScalarOperand + Send + Sync + Debug + Default + 'static {}
impl<T> Real for T where T: Float + FromPrimitive + LinalgScalar + ScalarOperand + Send + Sync + Debug + Default + 'static {}

/// Previous-action one-hot: 8 actions plus "none".
pub const PREV_ACTION_LEN: usize = NUM_ACTIONS + 1;
pub const OBS_FLAT_LEN: usize = STACK_DEPTH * OBS_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_padding: usize,
    pub mlp_widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    Paper,
    Desk,
}

impl ArchConfig {
    pub fn preset(p: ArchPreset) -> Self {
        match p {
            ArchPreset::Paper => ArchConfig {
                conv_channels: vec![128, 255, 512],
                conv_kernels: vec![3, 2, 2],
                conv_padding: 1,
                mlp_widths: vec![2048, 1024, 512, 256, 128],
            },
            ArchPreset::Desk => ArchConfig {
                conv_channels: vec![16, 32, 64],
                conv_kernels: vec![3, 2, 2],
                conv_padding: 1,
                mlp_widths: vec![256, 128, 64],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.mlp_widths.is_empty() {
            return Err(Error::Config("architecture lists must be nonempty".into()));
        }
        if self.conv_channels.len() != self.conv_kernels.len() {
            return Err(Error::Config("one kernel size per convolution layer".into()));
        }
        if self.conv_kernels.contains(&0) || self.conv_channels.contains(&0) || self.mlp_widths.contains(&0) {
            return Err(Error::Config("zero-sized layer".into()));
        }
        let mut dims = [STACK_DEPTH, OBS_ROWS, OBS_COLS];
        for &k in &self.conv_kernels {
            for d in dims.iter_mut() {
                if *d + 2 * self.conv_padding < k {
                    return Err(Error::Config(format!("kernel {k} larger than padded input")));
                }
                *d = *d + 2 * self.conv_padding + 1 - k;
            }
        }
        Ok(())
    }

    fn tower_shape(&self, extra_inputs: usize, outputs: usize) -> TowerShape {
        let mut convs = Vec::new();
        let mut dims = [STACK_DEPTH, OBS_ROWS, OBS_COLS];
        let mut cin = OBS_CHANNELS;
        for (&cout, &k) in self.conv_channels.iter().zip(&self.conv_kernels) {
            let geom = ConvGeometry::new(dims, cin, cout, k, self.conv_padding);
            dims = geom.out_dims;
            cin = cout;
            convs.push(geom);
        }
        let flat = dims.iter().product::<usize>() * cin;
        let mut dense = Vec::new();
        let mut fan_in = flat + extra_inputs;
        for &w in &self.mlp_widths {
            dense.push((fan_in, w));
            fan_in = w;
        }
        dense.push((fan_in, outputs));
        TowerShape {
            convs,
            dense,
            flat,
            extra: extra_inputs,
        }
    }

    pub fn actor_shape(&self) -> TowerShape {
        self.tower_shape(SYMBOL_LEN, NUM_ACTIONS)
    }

    pub fn critic_shape(&self) -> TowerShape {
        self.tower_shape(SYMBOL_LEN + PREV_ACTION_LEN, 1)
    }

    /// Total trainable scalars in actor plus critic, from shapes alone.
    pub fn param_count(&self) -> usize {
        self.actor_shape().param_count() + self.critic_shape().param_count()
    }
}

/// Gather table for a padded 3D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGeometry {
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    /// For every (output position, kernel offset): input position, or
    /// `usize::MAX` where the kernel reads padding.
    gather: Vec<usize>,
}

impl ConvGeometry {
    fn new(in_dims: [usize; 3], cin: usize, cout: usize, kernel: usize, pad: usize) -> Self {
        let out_dims = in_dims.map(|d| d + 2 * pad + 1 - kernel);
        let k3 = kernel * kernel * kernel;
        let mut gather = Vec::with_capacity(out_dims.iter().product::<usize>() * k3);
        for od in 0..out_dims[0] {
            for oh in 0..out_dims[1] {
                for ow in 0..out_dims[2] {
                    for kd in 0..kernel {
                        for kh in 0..kernel {
                            for kw in 0..kernel {
                                let id = (od + kd) as isize - pad as isize;
                                let ih = (oh + kh) as isize - pad as isize;
                                let iw = (ow + kw) as isize - pad as isize;
                                let inside = (0..in_dims[0] as isize).contains(&id)
                                    && (0..in_dims[1] as isize).contains(&ih)
                                    && (0..in_dims[2] as isize).contains(&iw);
                                gather.push(if inside {
                                    ((id as usize * in_dims[1]) + ih as usize) * in_dims[2] + iw as usize
                                } else {
                                    usize::MAX
                                });
                            }
                        }
                    }
                }
            }
        }
        ConvGeometry {
            in_dims,
            out_dims,
            cin,
            cout,
            kernel,
            gather,
        }
    }

    pub fn in_positions(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn offsets(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> (usize, usize) {
        (self.offsets() * self.cin, self.cout)
    }

    /// `x`: (batch·in_positions, cin) → (batch·out_positions, offsets·cin).
    fn im2col<F: Real>(&self, x: ArrayView2<F>, batch: usize) -> Array2<F> {
        let (pin, pout, k, cin) = (self.in_positions(), self.out_positions(), self.offsets(), self.cin);
        let mut cols = Array2::<F>::zeros((batch * pout, k * cin));
        let xs = x.as_slice().expect("contiguous activations");
        let cs = cols.as_slice_mut().expect("fresh array");
        let row_len = k * cin;
        for b in 0..batch {
            for p in 0..pout {
                let row = &mut cs[(b * pout + p) * row_len..(b * pout + p + 1) * row_len];
                for o in 0..k {
                    let src = self.gather[p * k + o];
                    if src != usize::MAX {
                        let at = (b * pin + src) * cin;
                        row[o * cin..(o + 1) * cin].copy_from_slice(&xs[at..at + cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Real>(&self, dcols: &Array2<F>, batch: usize) -> Array2<F> {
        let (pin, pout, k, cin) = (self.in_positions(), self.out_positions(), self.offsets(), self.cin);
        let mut dx = Array2::<F>::zeros((batch * pin, cin));
        let ds = dcols.as_slice().expect("contiguous");
        let xs = dx.as_slice_mut().expect("fresh array");
        let row_len = k * cin;
        for b in 0..batch {
            for p in 0..pout {
                let row = &ds[(b * pout + p) * row_len..(b * pout + p + 1) * row_len];
                for o in 0..k {
                    let src = self.gather[p * k + o];
                    if src != usize::MAX {
                        let at = (b * pin + src) * cin;
                        for (d, g) in xs[at..at + cin].iter_mut().zip(&row[o * cin..(o + 1) * cin]) {
                            *d = *d + *g;
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerShape {
    pub convs: Vec<ConvGeometry>,
    /// (fan_in, fan_out) for hidden layers then the head.
    pub dense: Vec<(usize, usize)>,
    /// Flattened feature width out of the last convolution.
    pub flat: usize,
    pub extra: usize,
}

impl TowerShape {
    pub fn param_count(&self) -> usize {
        let conv: usize = self
            .convs
            .iter()
            .map(|g| {
                let (i, o) = g.weight_shape();
                i * o + o
            })
            .sum();
        let dense: usize = self.dense.iter().map(|(i, o)| i * o + o).sum();
        conv + dense
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.convs
            .iter()
            .map(|g| g.weight_shape())
            .chain(self.dense.iter().copied())
            .collect()
    }

    fn layer_names(&self) -> Vec<String> {
        let n = self.dense.len();
        (0..self.convs.len())
            .map(|i| format!("conv{i}"))
            .chain((0..n - 1).map(|i| format!("fc{i}")))
            .chain(std::iter::once("head".to_string()))
            .collect()
    }
}

/// Weight (fan_in × fan_out) and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Real> Layer<F> {
    fn zeros(shape: (usize, usize)) -> Self {
        Layer {
            w: Array2::zeros(shape),
            b: Array1::zeros(shape.1),
        }
    }
}

/// Parameters of one tower, convolutions first.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower<F> {
    pub layers: Vec<Layer<F>>,
}

/// Cached activations from a training forward pass.
pub struct TowerCache<F> {
    batch: usize,
    /// im2col matrices, one per convolution.
    cols: Vec<Array2<F>>,
    /// Post-ReLU outputs of every hidden layer (convs then dense), used both
    /// as the ReLU mask and, for dense layers, as the next layer's input.
    acts: Vec<Array2<F>>,
    /// Input to the first dense layer.
    dense_in: Array2<F>,
}

impl<F: Real> TowerCache<F> {
    /// Which hidden units are active, in layer order.
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.acts.iter().flat_map(|a| a.iter().map(|v| *v > F::zero()))
    }
}

impl<F: Real> Tower<F> {
    pub fn zeros_like(shape: &TowerShape) -> Self {
        Tower {
            layers: shape.layer_shapes().into_iter().map(Layer::zeros).collect(),
        }
    }

    /// Uniform(±gain·sqrt(3/fan_in)) weights and zero biases.
    fn init(shape: &TowerShape, head_gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let shapes = shape.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| {
                // He scaling for ReLU layers.
                let gain = if i == last { head_gain } else { 2f64.sqrt() };
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                let w = Array2::from_shape_simple_fn((fan_in, fan_out), || F::from_f64(rng.random_range(-bound..bound)).unwrap());
                Layer {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Tower { layers }
    }

    pub fn forward(&self, shape: &TowerShape, obs: ArrayView2<F>, extra: ArrayView2<F>) -> Array2<F> {
        self.run(shape, obs, extra, false).0
    }

    pub fn forward_train(&self, shape: &TowerShape, obs: ArrayView2<F>, extra: ArrayView2<F>) -> (Array2<F>, TowerCache<F>) {
        let (out, cache) = self.run(shape, obs, extra, true);
        (out, cache.expect("cache requested"))
    }

    fn run(&self, shape: &TowerShape, obs: ArrayView2<F>, extra: ArrayView2<F>, keep: bool) -> (Array2<F>, Option<TowerCache<F>>) {
        let batch = obs.nrows();
        let nconv = shape.convs.len();
        let mut cols_cache = Vec::new();
        let mut acts = Vec::new();

        // (batch·positions, channels)
        let mut x = obs
            .to_owned()
            .into_shape_with_order((batch * shape.convs[0].in_positions(), OBS_CHANNELS))
            .expect("observation width");
        for (geom, layer) in shape.convs.iter().zip(&self.layers) {
            let cols = geom.im2col(x.view(), batch);
            let mut z = cols.dot(&layer.w);
            add_bias(&mut z, &layer.b);
            z.mapv_inplace(relu);
            if keep {
                cols_cache.push(cols);
                acts.push(z.clone());
            }
            x = z;
        }
        let feat = x.into_shape_with_order((batch, shape.flat)).expect("flatten");
        let mut h = Array2::<F>::zeros((batch, shape.flat + shape.extra));
        h.slice_mut(s![.., ..shape.flat]).assign(&feat);
        h.slice_mut(s![.., shape.flat..]).assign(&extra);
        let dense_in = if keep { h.clone() } else { Array2::zeros((0, 0)) };

        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate().skip(nconv) {
            let mut z = h.dot(&layer.w);
            add_bias(&mut z, &layer.b);
            if i < last {
                z.mapv_inplace(relu);
                if keep {
                    acts.push(z.clone());
                }
            }
            h = z;
        }
        let cache = keep.then_some(TowerCache {
            batch,
            cols: cols_cache,
            acts,
            dense_in,
        });
        (h, cache)
    }

    /// Gradients of all parameters given d(loss)/d(output).
    pub fn backward(&self, shape: &TowerShape, cache: &TowerCache<F>, d_out: &Array2<F>) -> Tower<F> {
        let nconv = shape.convs.len();
        let nlayers = self.layers.len();
        let mut grads: Vec<Option<Layer<F>>> = vec![None; nlayers];
        let mut d = d_out.clone();

        for i in (nconv..nlayers).rev() {
            let input = if i == nconv { &cache.dense_in } else { &cache.acts[i - 1] };
            grads[i] = Some(Layer {
                w: standard(input.t().dot(&d)),
                b: d.sum_axis(Axis(0)),
            });
            let mut dx = standard(d.dot(&self.layers[i].w.t()));
            if i > nconv {
                relu_backward(&mut dx, &cache.acts[i - 1]);
            }
            d = dx;
        }

        // d: (batch, flat + extra) → conv features
        let batch = cache.batch;
        let last_geom = &shape.convs[nconv - 1];
        let mut dconv = d
            .slice(s![.., ..shape.flat])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * last_geom.out_positions(), last_geom.cout))
            .expect("unflatten");
        for i in (0..nconv).rev() {
            relu_backward(&mut dconv, &cache.acts[i]);
            let cols = &cache.cols[i];
            grads[i] = Some(Layer {
                w: standard(cols.t().dot(&dconv)),
                b: dconv.sum_axis(Axis(0)),
            });
            if i > 0 {
                let dcols = standard(dconv.dot(&self.layers[i].w.t()));
                dconv = shape.convs[i].col2im(&dcols, batch);
            }
        }
        Tower {
            layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tower<G> {
        Tower {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: l.w.mapv(|v| G::from(v).unwrap()),
                    b: l.b.mapv(|v| G::from(v).unwrap()),
                })
                .collect(),
        }
    }
}

fn standard<F: Real>(a: Array2<F>) -> Array2<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn add_bias<F: Real>(z: &mut Array2<F>, b: &Array1<F>) {
    for mut row in z.rows_mut() {
        row.zip_mut_with(b, |x, &y| *x = *x + y);
    }
}

#[inline]
fn relu<F: Real>(v: F) -> F {
    if v > F::zero() {
        v
    } else {
        F::zero()
    }
}

fn relu_backward<F: Real>(d: &mut Array2<F>, act: &Array2<F>) {
    let ds = d.as_slice_mut().expect("standard layout");
    let acts = act.as_slice().expect("standard layout");
    for (g, &a) in ds.iter_mut().zip(acts) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Actor and critic parameters together with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic<F> {
    pub arch: ArchConfig,
    pub actor: Tower<F>,
    pub critic: Tower<F>,
}

/// Named parameter views in a fixed order, used for checkpoints and
/// optimizer bookkeeping.
pub struct NamedParam<'a, F> {
    pub name: String,
    pub data: &'a [F],
}

/// Network outputs for a batch.
#[derive(Debug, Clone)]
pub struct Outputs<F> {
    /// (batch, 8)
    pub logits: Array2<F>,
    /// (batch,)
    pub values: Array1<F>,
}

/// Batched network inputs.
#[derive(Debug, Clone)]
pub struct Inputs<F> {
    /// (batch, 108): stacked frames as (frame, row, col, channel).
    pub obs: Array2<F>,
    /// (batch, 9)
    pub symbol: Array2<F>,
    /// (batch, 9): previous action one-hot, last slot = none.
    pub prev_action: Array2<F>,
}

impl<F: Real> Inputs<F> {
    pub fn with_capacity(batch: usize) -> Self {
        Inputs {
            obs: Array2::zeros((batch, OBS_FLAT_LEN)),
            symbol: Array2::zeros((batch, SYMBOL_LEN)),
            prev_action: Array2::zeros((batch, PREV_ACTION_LEN)),
        }
    }

    pub fn batch(&self) -> usize {
        self.obs.nrows()
    }

    pub fn set_row(&mut self, i: usize, obs: &ObservationStack, symbol: &SymbolInput, prev: Option<Action>) {
        let mut flat = [0f32; OBS_FLAT_LEN];
        obs.write_flat(&mut flat);
        for (d, v) in self.obs.row_mut(i).iter_mut().zip(flat) {
            *d = F::from_f32(v).unwrap();
        }
        for (d, v) in self.symbol.row_mut(i).iter_mut().zip(symbol.0) {
            *d = F::from_f32(v).unwrap();
        }
        let mut pa = self.prev_action.row_mut(i);
        pa.fill(F::zero());
        pa[prev.map_or(NUM_ACTIONS, Action::index)] = F::one();
    }

    pub fn from_rows(rows: &[(&ObservationStack, &SymbolInput, Option<Action>)]) -> Self {
        let mut inp = Self::with_capacity(rows.len());
        for (i, (o, s, p)) in rows.iter().enumerate() {
            inp.set_row(i, o, s, *p);
        }
        inp
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Inputs {
            obs: self.obs.select(Axis(0), idx),
            symbol: self.symbol.select(Axis(0), idx),
            prev_action: self.prev_action.select(Axis(0), idx),
        }
    }

    pub fn cast<G: Real>(&self) -> Inputs<G> {
        let c = |a: &Array2<F>| a.mapv(|v| G::from(v).unwrap());
        Inputs {
            obs: c(&self.obs),
            symbol: c(&self.symbol),
            prev_action: c(&self.prev_action),
        }
    }

    fn critic_extra(&self) -> Array2<F> {
        ndarray::concatenate(Axis(1), &[self.symbol.view(), self.prev_action.view()]).expect("same batch")
    }
}

impl<F: Real> ActorCritic<F> {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = Tower::init(&arch.actor_shape(), 0.01, &mut rng);
        let critic = Tower::init(&arch.critic_shape(), 1.0, &mut rng);
        Ok(ActorCritic {
            arch: arch.clone(),
            actor,
            critic,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ActorCritic {
            arch: self.arch.clone(),
            actor: Tower::zeros_like(&self.arch.actor_shape()),
            critic: Tower::zeros_like(&self.arch.critic_shape()),
        }
    }

    pub fn actor_logits(&self, inp: &Inputs<F>) -> Array2<F> {
        self.actor.forward(&self.arch.actor_shape(), inp.obs.view(), inp.symbol.view())
    }

    pub fn critic_values(&self, inp: &Inputs<F>) -> Array1<F> {
        self.critic
            .forward(&self.arch.critic_shape(), inp.obs.view(), inp.critic_extra().view())
            .column(0)
            .to_owned()
    }

    pub fn forward(&self, inp: &Inputs<F>) -> Outputs<F> {
        Outputs {
            logits: self.actor_logits(inp),
            values: self.critic_values(inp),
        }
    }

    /// Masked action distribution for one input row.
    pub fn actor_forward(&self, inp: &Inputs<F>, row: usize, mask: &crate::abacus::ActionMask) -> Result<MaskedCategorical> {
        let logits = self.actor_logits(&inp.select(&[row]));
        let l: Vec<f64> = logits.row(0).iter().map(|v| v.to_f64().unwrap()).collect();
        MaskedCategorical::new(&l, mask)
    }

    /// Active/inactive state of every hidden ReLU unit of both towers. A
    /// finite difference is only meaningful while this stays unchanged.
    pub fn relu_pattern(&self, inp: &Inputs<F>) -> Vec<bool> {
        let (_, a) = self
            .actor
            .forward_train(&self.arch.actor_shape(), inp.obs.view(), inp.symbol.view());
        let extra = inp.critic_extra();
        let (_, c) = self.critic.forward_train(&self.arch.critic_shape(), inp.obs.view(), extra.view());
        a.relu_pattern().chain(c.relu_pattern()).collect()
    }

    /// Loss value and exact gradients of every parameter, for a scalar loss
    /// of the network outputs. `loss` returns the loss and its gradient with
    /// respect to the logits and the values.
    pub fn gradients<L>(&self, inp: &Inputs<F>, loss: L) -> Result<(F, ActorCritic<F>)>
    where
        L: FnOnce(&Outputs<F>) -> (F, Outputs<F>),
    {
        let ashape = self.arch.actor_shape();
        let cshape = self.arch.critic_shape();
        let (logits, acache) = self.actor.forward_train(&ashape, inp.obs.view(), inp.symbol.view());
        let extra = inp.critic_extra();
        let (values, ccache) = self.critic.forward_train(&cshape, inp.obs.view(), extra.view());
        let out = Outputs {
            logits,
            values: values.column(0).to_owned(),
        };
        let (l, d) = loss(&out);
        if d.logits.dim() != out.logits.dim() || d.values.len() != out.values.len() {
            return Err(Error::Shape(format!(
                "loss gradient shapes {:?}/{} do not match outputs {:?}/{}",
                d.logits.dim(),
                d.values.len(),
                out.logits.dim(),
                out.values.len()
            )));
        }
        let dv = d.values.insert_axis(Axis(1));
        Ok((
            l,
            ActorCritic {
                arch: self.arch.clone(),
                actor: self.actor.backward(&ashape, &acache, &d.logits),
                critic: self.critic.backward(&cshape, &ccache, &dv),
            },
        ))
    }

    pub fn named_params(&self) -> Vec<NamedParam<'_, F>> {
        let mut out = Vec::new();
        for (tower, shape, name) in [
            (&self.actor, self.arch.actor_shape(), "actor"),
            (&self.critic, self.arch.critic_shape(), "critic"),
        ] {
            for (layer, lname) in tower.layers.iter().zip(shape.layer_names()) {
                out.push(NamedParam {
                    name: format!("{name}.{lname}.weight"),
                    data: layer.w.as_slice().expect("standard layout"),
                });
                out.push(NamedParam {
                    name: format!("{name}.{lname}.bias"),
                    data: layer.b.as_slice().expect("standard layout"),
                });
            }
        }
        out
    }

    /// Mutable flat views in the same order as [`ActorCritic::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for tower in [&mut self.actor, &mut self.critic] {
            for layer in tower.layers.iter_mut() {
                out.push(layer.w.as_slice_mut().expect("standard layout"));
                out.push(layer.b.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ActorCritic<G> {
        ActorCritic {
            arch: self.arch.clone(),
            actor: self.actor.cast(),
            critic: self.critic.cast(),
        }
    }

    /// Replace every bias with Uniform(±scale). Zero biases on sparse inputs
    /// put many pre-activations exactly on the ReLU kink, where finite
    /// differences are meaningless; gradient checks start from here instead.
    pub fn jitter_biases(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for tower in [&mut self.actor, &mut self.critic] {
            for layer in tower.layers.iter_mut() {
                layer.b.mapv_inplace(|_| F::from_f64(rng.random_range(-scale..scale)).unwrap());
            }
        }
    }

    /// `self += scale · other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &ActorCritic<F>, scale: F) {
        for (a, b) in self.params_mut().into_iter().zip(other.named_params()) {
            for (x, y) in a.iter_mut().zip(b.data) {
                *x = *x + scale * *y;
            }
        }
    }
}

/// Single-precision network used for training, acting and checkpoints.
pub type NetParams = ActorCritic<f32>;
