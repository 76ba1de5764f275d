//! Neural parser: a small tape-based autodiff engine, the encoder-decoder
//! model with its prediction heads, the multi-task objective and training.

pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod train;
pub mod vocab;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use model::{
    combine_losses, param_group, EncoderOutput, LossValue, LossWeights, Model, ModelConfig, Noise, ParseTargets,
    StepDistributions, TeacherForced,
};
pub use optim::{scheduled_lr, Adam, AdamConfig};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use train::{teacher_forced_accuracy, train, EpochRecord, TrainConfig, TrainLog};
pub use vocab::{GoldMention, Question, Vocab, CTX, SEP, UNK};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const STATE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDump {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Serializable model: configuration plus every named tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorDump>,
}

impl ModelState {
    pub fn capture<T: Scalar>(model: &Model<T>) -> Self {
        ModelState {
            version: STATE_VERSION,
            config: model.cfg.clone(),
            tensors: model
                .params
                .iter()
                .map(|(name, v)| TensorDump {
                    name: name.to_string(),
                    shape: [v.nrows(), v.ncols()],
                    data: v.iter().map(|x| x.to_f64_lossy()).collect(),
                })
                .collect(),
        }
    }

    pub fn restore<T: Scalar>(&self) -> Result<Model<T>> {
        if self.version != STATE_VERSION {
            return Err(Error::Config(format!(
                "model state version {} is not supported",
                self.version
            )));
        }
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.iter().map(|&x| T::of(x)).collect())
                    .map_err(|e| Error::Config(format!("tensor {}: {e}", t.name)))?;
                Ok((t.name.clone(), arr))
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_tensors(self.config.clone(), tensors)
    }
}
