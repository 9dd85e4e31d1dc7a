use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

use super::TrainConfig;
use crate::attention::{stack_forward, BlockTrace, DyHeadStack};
use crate::error::{Error, Result};
use crate::head::{predict, GridSpec, HeadOutputs, HeadParams};
use crate::pyramid::{align_pyramid, median_level};
use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, Var};

/// Factor of the average pool applied to the image before the first conv.
const STEM_POOL: usize = 2;

/// Per level, a stride-2 3x3 convolution followed by a stride-1 one, each
/// with ReLU. The first level reads the pooled image and has stride 4; each
/// further level halves the resolution again, so level `i` has stride
/// `4 * 2^i`.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    /// `(kernel, bias)` of the strided conv of each level.
    pub down: Vec<(ParamId, ParamId)>,
    /// `(kernel, bias)` of the stride-1 conv of each level.
    pub refine: Vec<(ParamId, ParamId)>,
}

impl ToyBackbone {
    pub fn new(
        store: &mut ParamStore,
        levels: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // He-uniform for ReLU layers.
        let mut conv = |store: &mut ParamStore, name: String, cin: usize| -> Result<(ParamId, ParamId)> {
            let bound = (6.0 / (9 * cin) as f64).sqrt();
            let k = store.add(
                format!("{name}.weight"),
                Tensor::from_fn(&[3, 3, cin, channels], |_| rng.random_range(-bound..bound)),
            )?;
            let b = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]))?;
            Ok((k, b))
        };
        let mut down = Vec::with_capacity(levels);
        let mut refine = Vec::with_capacity(levels);
        for i in 0..levels {
            let cin = if i == 0 { 3 } else { channels };
            down.push(conv(store, format!("backbone.down{i}"), cin)?);
            refine.push(conv(store, format!("backbone.refine{i}"), channels)?);
        }
        Ok(ToyBackbone { down, refine })
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.down.len()).map(|i| 4 << i).collect()
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, image: Var) -> Result<Vec<Var>> {
        tape.set_stage("backbone");
        let mut cur = tape.avg_pool(image, STEM_POOL)?;
        let mut levels = Vec::with_capacity(self.down.len());
        for (&(k, b), &(rk, rb)) in self.down.iter().zip(&self.refine) {
            let y = tape.conv2d_3x3(cur, params.var(k), params.var(b), 2)?;
            let y = tape.relu(y);
            let y = tape.conv2d_3x3(y, params.var(rk), params.var(rb), 1)?;
            cur = tape.relu(y);
            levels.push(cur);
        }
        Ok(levels)
    }
}

/// Backbone, attention stack and head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Detector {
    pub store: ParamStore,
    pub backbone: ToyBackbone,
    pub stack: DyHeadStack,
    pub head: HeadParams,
    pub grid: GridSpec,
    pub num_classes: usize,
}

/// Everything one forward pass produces.
pub struct Forward {
    pub binding: Binding,
    pub aligned: Var,
    pub traces: Vec<BlockTrace>,
    pub outputs: HeadOutputs,
}

impl Detector {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let block = cfg.block_config();
        let mut rng = Pcg32::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let backbone = ToyBackbone::new(&mut store, cfg.levels, cfg.channels, &mut rng)?;
        let stack = DyHeadStack::new(&mut store, "dyhead", &block, cfg.depth, &mut rng)?;
        let head = HeadParams::new(&mut store, "head", cfg.levels, cfg.channels, cfg.num_classes, &mut rng)?;
        let median = median_level(cfg.levels)?;
        let stride = backbone.strides()[median];
        let side = cfg.image_size / stride;
        if side == 0 || cfg.image_size % stride != 0 {
            return Err(Error::invalid(format!(
                "image size {} is not a multiple of the median stride {stride}",
                cfg.image_size
            )));
        }
        Ok(Detector {
            store,
            backbone,
            stack,
            head,
            grid: GridSpec {
                levels: cfg.levels,
                height: side,
                width: side,
                stride: stride as f64,
            },
            num_classes: cfg.num_classes,
        })
    }

    pub fn forward(&self, tape: &mut Tape, image: &Tensor) -> Result<Forward> {
        let binding = self.store.bind(tape);
        let img = tape.constant(image.clone());
        let levels = self.backbone.forward(tape, &binding, img)?;
        let aligned = align_pyramid(tape, &levels)?;
        let (y, traces) = stack_forward(tape, &binding, &self.stack, aligned)?;
        let outputs = predict(tape, &binding, &self.head, y)?;
        Ok(Forward {
            binding,
            aligned,
            traces,
            outputs,
        })
    }
}
