//! The trellis network: blocks of parallel F units joined by routers.
//!
//! Block 0 holds a single shared unit. After every non-final block a router
//! reads the output of the unit each sample actually visited and produces a
//! distribution over the next block's units. Exactly one unit per block runs
//! per sample: the batch is partitioned by route, each non-empty slice is
//! processed by its unit, and the results are gathered back into batch order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{collect_grads, infer_shapes, Binding, LayerSpec, ParamStore, Stack};
use crate::routing::{uniform_route, RouterSpec, RouterState, RoutingDistribution};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Init stream for F units and the classifier head.
const UNIT_STREAM: u64 = 0;
/// Init stream for routers, kept apart so adding routers never perturbs unit init.
const ROUTER_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub units: usize,
    pub layers: Vec<LayerSpec>,
    /// Router choosing among the next block's units; absent on the final block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router: Option<RouterSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrellisConfig {
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
    pub head: Vec<LayerSpec>,
}

impl TrellisConfig {
    pub fn unit_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.units).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("trellis needs at least one block"));
        }
        if self.blocks[0].units != 1 {
            return Err(Error::config(format!(
                "block 0 must hold a single shared unit, got {}",
                self.blocks[0].units
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        for (l, block) in self.blocks.iter().enumerate() {
            if block.units == 0 {
                return Err(Error::config(format!("block {l} has no units")));
            }
            let last = l + 1 == self.blocks.len();
            match (&block.router, last) {
                (Some(_), true) => return Err(Error::config("the final block cannot carry a router")),
                (None, false) if self.blocks[l + 1].units > 1 => {
                    return Err(Error::config(format!(
                        "block {l} feeds {} units but has no router",
                        self.blocks[l + 1].units
                    )))
                }
                _ => {}
            }
        }
        self.shapes().map(|_| ())
    }

    /// Per-sample output shape of every block plus the head output.
    pub fn shapes(&self) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
        let mut shape = self.input_shape.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            if let Some(last) = infer_shapes(&block.layers, &shape)?.pop() {
                shape = last;
            }
            blocks.push(shape.clone());
        }
        let head = infer_shapes(&self.head, &shape)?.pop().unwrap_or(shape);
        if head != [self.num_classes] {
            return Err(Error::config(format!(
                "head produces {head:?}, expected [{}] logits",
                self.num_classes
            )));
        }
        Ok((blocks, head))
    }

    /// Blocks whose unit is chosen by a router, i.e. blocks `1..L`.
    pub fn routed_blocks(&self) -> usize {
        self.blocks.len().saturating_sub(1)
    }
}

/// How the next unit is chosen while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Sample each route from the router's softmax.
    IgSampling,
    /// Uniformly random routes (random-routing control).
    Random,
    /// Uniformly random routes while routers still learn from IG.
    Warmup,
}

/// How the next unit is chosen at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum EvalRouting {
    Argmax,
    Random { seed: u64 },
}

/// Chosen unit per routed block per sample: `units[l-1][i]` is sample `i`'s unit in block `l`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteAssignment {
    pub units: Vec<Vec<usize>>,
}

impl RouteAssignment {
    /// Root-to-leaf unit indices of one sample (block 0 implied).
    pub fn path(&self, sample: usize) -> Vec<usize> {
        self.units.iter().map(|b| b[sample]).collect()
    }
}

/// Disjoint cover of a batch by unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPartition {
    pub members: Vec<Vec<usize>>,
}

impl BatchPartition {
    pub fn from_route(route: &[usize], units: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); units];
        for (i, &u) in route.iter().enumerate() {
            members
                .get_mut(u)
                .ok_or_else(|| Error::input(format!("sample {i} routed to unit {u} of {units}")))?
                .push(i);
        }
        Ok(BatchPartition { members })
    }

    pub fn batch_len(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    /// Sample order after concatenating the per-unit slices.
    pub fn scatter_order(&self) -> Vec<usize> {
        self.members.iter().flatten().copied().collect()
    }

    /// Inverse of [`BatchPartition::scatter_order`]: position of each original sample.
    pub fn gather_permutation(&self) -> Vec<usize> {
        let order = self.scatter_order();
        let mut inv = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inv[i] = pos;
        }
        inv
    }
}

/// Output of a recorded forward pass.
pub struct ForwardPass {
    pub logits: Var,
    pub routes: RouteAssignment,
    /// Routing probabilities produced after each non-final block.
    pub distributions: Vec<Var>,
    /// Router features `h_l(x)`, one per router.
    pub router_features: Vec<Var>,
    /// Gathered output of each block, in batch order.
    pub block_outputs: Vec<Var>,
    pub bindings: Vec<Option<Var>>,
}

/// Loss terms and gradients of one training step.
#[derive(Clone, Debug)]
pub struct StepGradients<T> {
    pub cross_entropy: f64,
    pub information_gains: Vec<f64>,
    /// `CE − λ_IG·Σ IG` (regularizer excluded).
    pub objective: f64,
    pub grads: Vec<Option<Tensor<T>>>,
}

enum Policy<'r, R> {
    Train(RoutingMode, &'r mut R),
    Argmax,
    Random(ChaCha8Rng),
}

#[derive(Clone, Debug)]
pub struct Trellis<T> {
    config: TrellisConfig,
    params: ParamStore<T>,
    units: Vec<Vec<Stack>>,
    routers: Vec<Option<RouterState>>,
    head: Stack,
}

impl<T: Element> Trellis<T> {
    /// Build and initialise a model. F units and the head are initialised in block order
    /// from one seeded stream, routers from a second one.
    pub fn new(config: TrellisConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (block_shapes, _) = config.shapes()?;
        let mut params = ParamStore::new();
        let mut unit_rng = ChaCha8Rng::seed_from_u64(seed);
        unit_rng.set_stream(UNIT_STREAM);
        let mut router_rng = ChaCha8Rng::seed_from_u64(seed);
        router_rng.set_stream(ROUTER_STREAM);

        let mut units = Vec::with_capacity(config.blocks.len());
        let mut shape = config.input_shape.clone();
        for (l, block) in config.blocks.iter().enumerate() {
            let stacks = (0..block.units)
                .map(|k| Stack::build(&block.layers, &shape, &format!("block{l}.unit{k}"), true, &mut params, &mut unit_rng))
                .collect::<Result<Vec<_>>>()?;
            units.push(stacks);
            shape = block_shapes[l].clone();
        }
        let head = Stack::build(&config.head, &shape, "head", true, &mut params, &mut unit_rng)?;

        let mut routers = Vec::with_capacity(config.blocks.len());
        for (l, block) in config.blocks.iter().enumerate() {
            let router = match &block.router {
                Some(spec) => Some(RouterState::build(
                    spec,
                    &block_shapes[l],
                    config.blocks[l + 1].units,
                    &format!("router{l}"),
                    &mut params,
                    &mut router_rng,
                )?),
                None => None,
            };
            routers.push(router);
        }
        Ok(Trellis { config, params, units, routers, head })
    }

    pub fn config(&self) -> &TrellisConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn unit(&self, block: usize, unit: usize) -> &Stack {
        &self.units[block][unit]
    }

    pub fn router(&self, block: usize) -> Option<&RouterState> {
        self.routers.get(block).and_then(Option::as_ref)
    }

    pub fn head(&self) -> &Stack {
        &self.head
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        if !(temperature > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {temperature}")));
        }
        for r in self.routers.iter_mut().flatten() {
            r.temperature = temperature;
        }
        Ok(())
    }

    /// Stochastic training pass: routes are sampled (or drawn uniformly in
    /// random/warm-up modes) per sample per block, dropout is active.
    pub fn forward_train<R: RngCore>(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        mode: RoutingMode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        self.forward(tape, images, true, Policy::Train(mode, rng))
    }

    /// Deterministic single-path inference with argmax routing.
    pub fn forward_eval(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<ForwardPass> {
        self.forward::<ChaCha8Rng>(tape, images, false, Policy::Argmax)
    }

    /// Inference with uniformly random routes, for models trained without learned routing.
    pub fn forward_eval_random(&self, tape: &mut Tape<T>, images: &Tensor<T>, seed: u64) -> Result<ForwardPass> {
        self.forward::<ChaCha8Rng>(tape, images, false, Policy::Random(ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn forward_with(&self, tape: &mut Tape<T>, images: &Tensor<T>, routing: EvalRouting) -> Result<ForwardPass> {
        match routing {
            EvalRouting::Argmax => self.forward_eval(tape, images),
            EvalRouting::Random { seed } => self.forward_eval_random(tape, images, seed),
        }
    }

    fn forward<R: RngCore>(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        training: bool,
        mut policy: Policy<'_, R>,
    ) -> Result<ForwardPass> {
        let mut sample_shape = images.shape().to_vec();
        let batch = if sample_shape.is_empty() { 0 } else { sample_shape.remove(0) };
        if sample_shape != self.config.input_shape {
            return Err(Error::config(format!(
                "batch samples have shape {sample_shape:?}, model expects {:?}",
                self.config.input_shape
            )));
        }
        if batch == 0 {
            return Err(Error::input("forward pass over an empty batch"));
        }
        let mut bind = Binding::new(&self.params, training);
        // Dropout randomness comes from the training rng; evaluation never draws.
        let mut idle = ChaCha8Rng::seed_from_u64(0);
        let mut h = tape.constant(images.clone())?;
        let mut routes = RouteAssignment::default();
        let mut distributions = Vec::new();
        let mut router_features = Vec::new();
        let mut block_outputs = Vec::new();
        let mut route: Option<Vec<usize>> = None;

        for (l, stacks) in self.units.iter().enumerate() {
            h = match route.take() {
                None => {
                    stacks[0].forward(tape, &mut bind, h, training, noise(&mut policy, &mut idle))?
                }
                Some(r) => {
                    let part = BatchPartition::from_route(&r, stacks.len())?;
                    let mut outs = Vec::new();
                    for (k, members) in part.members.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let sub = tape.select_rows(h, members)?;
                        let out = stacks[k].forward(tape, &mut bind, sub, training, noise(&mut policy, &mut idle))?;
                        outs.push((out, members.as_slice()));
                    }
                    routes.units.push(r);
                    tape.scatter_rows(&outs, batch)?
                }
            };
            block_outputs.push(h);

            if l + 1 < self.units.len() {
                let next_units = self.units[l + 1].len();
                let chosen = match &self.routers[l] {
                    Some(router) => {
                        let features =
                            router.features(tape, &mut bind, h, training, noise(&mut policy, &mut idle))?;
                        let probs = router.routing_softmax(tape, &mut bind, features)?;
                        router_features.push(features);
                        distributions.push(probs);
                        let dist = RoutingDistribution::new(tape.value(probs).clone())?;
                        match &mut policy {
                            Policy::Train(RoutingMode::IgSampling, rng) => dist.sample(*rng),
                            Policy::Train(_, rng) => uniform_route(batch, next_units, *rng),
                            Policy::Argmax => dist.argmax(),
                            Policy::Random(rng) => uniform_route(batch, next_units, rng),
                        }
                    }
                    None => vec![0; batch],
                };
                route = Some(chosen);
            }
        }
        let logits = self.head.forward(tape, &mut bind, h, training, noise(&mut policy, &mut idle))?;
        Ok(ForwardPass {
            logits,
            routes,
            distributions,
            router_features,
            block_outputs,
            bindings: bind.into_vars(),
        })
    }

    /// Build the step objective `CE − λ_IG·Σ_l IG_l` on the tape and backpropagate it.
    ///
    /// Cross-entropy reaches only the units each sample visited and the head; routers
    /// see it through nothing because route selection is a hard choice. IG terms reach
    /// router parameters and every F unit upstream of each router.
    pub fn backward_train(
        &self,
        tape: &mut Tape<T>,
        pass: &ForwardPass,
        labels: &[usize],
        lambda_ig: f64,
        lambda_balance: f64,
    ) -> Result<StepGradients<T>> {
        if !tape.owns(pass.logits) {
            return Err(Error::Usage("backward_train needs the tape its forward pass was recorded on".into()));
        }
        let ce = tape.softmax_cross_entropy(pass.logits, labels)?;
        let mut igs = Vec::with_capacity(pass.distributions.len());
        let mut ig_vars = Vec::with_capacity(pass.distributions.len());
        for &probs in &pass.distributions {
            let ig = tape.information_gain(probs, labels, self.config.num_classes, lambda_balance)?;
            igs.push(tape.value(ig).data()[0].as_f64());
            ig_vars.push(ig);
        }
        let mut loss = ce;
        if lambda_ig != 0.0 {
            if let Some((&first, rest)) = ig_vars.split_first() {
                let mut total = first;
                for &v in rest {
                    total = tape.add(total, v)?;
                }
                let weighted = tape.scale(total, -lambda_ig)?;
                loss = tape.add(ce, weighted)?;
            }
        }
        let objective = tape.value(loss).data()[0].as_f64();
        tape.backward(loss)?;
        Ok(StepGradients {
            cross_entropy: tape.value(ce).data()[0].as_f64(),
            information_gains: igs,
            objective,
            grads: collect_grads(tape, &pass.bindings),
        })
    }

    /// Parameter ids that belong to a given unit, router or the head, by name prefix.
    pub fn param_ids_with_prefix(&self, prefix: &str) -> Vec<crate::nn::ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| crate::nn::ParamId(i))
            .collect()
    }
}

/// Randomness for dropout: the training rng, or an idle stream that inference never draws from.
fn noise<'a, R: RngCore>(policy: &'a mut Policy<'_, R>, idle: &'a mut ChaCha8Rng) -> &'a mut dyn RngCore {
    match policy {
        Policy::Train(_, rng) => &mut **rng,
        _ => idle,
    }
}
