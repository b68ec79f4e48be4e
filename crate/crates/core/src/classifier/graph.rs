use tract_onnx::prelude::*;
use tract_onnx::tract_core::dims;

use super::{ClassifierError, GraphOutput, GraphSpec, TileClassifier};
use crate::slide::TileRecord;

type Runnable = Arc<TypedRunnableModel>;

/// Exported network run through tract with a symbolic batch dimension.
pub struct GraphClassifier {
    model: Runnable,
    spec: GraphSpec,
}

impl GraphClassifier {
    pub fn load(spec: &GraphSpec) -> Result<Self, ClassifierError> {
        let load_err = |e: TractError| ClassifierError::ModelLoad(format!("{}: {e}", spec.path.display()));
        let s = spec.input_size as usize;
        let model = tract_onnx::onnx().model_for_path(&spec.path).map_err(load_err)?;
        let batch = model.sym("N");
        let model = model
            .with_input_fact(0, f32::fact(dims!(batch, 3, s, s)).into())
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(load_err)?;
        Ok(Self {
            model,
            spec: spec.clone(),
        })
    }

    fn input_tensor(&self, batch: &[TileRecord]) -> Tensor {
        let s = self.spec.input_size as usize;
        let (mean, std) = (self.spec.mean, self.spec.std);
        tract_ndarray::Array4::from_shape_fn((batch.len(), 3, s, s), |(n, c, y, x)| {
            let v = f32::from(batch[n].pixels().get_pixel(x as u32, y as u32)[c]) / 255.0;
            (v - mean[c]) / std[c]
        })
        .into()
    }
}

fn softmax_column(row: &[f32], index: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|&v| f64::from(v - max).exp()).collect();
    exps[index] / exps.iter().sum::<f64>()
}

impl TileClassifier for GraphClassifier {
    fn input_size(&self) -> Option<u32> {
        Some(self.spec.input_size)
    }

    fn predict(&self, batch: &[TileRecord]) -> Result<Vec<f64>, ClassifierError> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let infer = |e: TractError| ClassifierError::Inference(e.to_string());
        let outputs = self
            .model
            .run(tvec!(self.input_tensor(batch).into()))
            .map_err(infer)?;
        let view = outputs[0].to_plain_array_view::<f32>().map_err(infer)?;
        let n = batch.len();
        if view.len() % n != 0 || view.shape().first() != Some(&n) {
            return Err(ClassifierError::Inference(format!(
                "output shape {:?} does not match batch of {n}",
                view.shape()
            )));
        }
        let width = view.len() / n;
        let flat: Vec<f32> = view.iter().copied().collect();
        let pick = |row: &[f32]| -> Result<f64, ClassifierError> {
            let column = |i: usize| {
                row.get(i).copied().map(f64::from).ok_or_else(|| {
                    ClassifierError::Inference(format!("output has {width} columns, positive index is {i}"))
                })
            };
            match self.spec.output {
                GraphOutput::Softmax => {
                    column(self.spec.positive_index)?;
                    Ok(softmax_column(row, self.spec.positive_index))
                }
                GraphOutput::Sigmoid => Ok(1.0 / (1.0 + (-column(0)?).exp())),
                GraphOutput::Probability if width == 1 => column(0),
                GraphOutput::Probability => column(self.spec.positive_index),
            }
        };
        flat.chunks_exact(width).map(pick).collect()
    }

    fn describe(&self) -> String {
        format!("graph({})", self.spec.path.display())
    }
}
