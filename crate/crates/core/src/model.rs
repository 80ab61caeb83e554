use crate::numerics::{Matrix, Rng};
use crate::objective::OutputParams;
use crate::vgru::VgruParams;

/// All trainable weights: the variational GRU cell and the output layer.
///
/// The same shape doubles as gradient and optimizer-state storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cell: VgruParams,
    pub output: OutputParams,
}

/// Tensor names in canonical order, as written to checkpoints.
pub const TENSOR_NAMES: [&str; 7] = ["Wz", "Uz", "Wr", "Ur", "W", "U", "Wy"];

impl Model {
    pub fn zeros(latent_dim: usize, num_items: usize) -> Self {
        Model {
            cell: VgruParams::zeros(latent_dim, num_items),
            output: OutputParams::zeros(latent_dim, num_items),
        }
    }

    /// Glorot-normal initialization, drawn in [`TENSOR_NAMES`] order.
    pub fn glorot(latent_dim: usize, num_items: usize, rng: &mut Rng) -> Self {
        let mut model = Model::zeros(latent_dim, num_items);
        for t in model.tensors_mut() {
            *t = crate::trainer::glorot_init(t.rows(), t.cols(), rng);
        }
        model
    }

    pub fn zeros_like(&self) -> Self {
        Model::zeros(self.latent_dim(), self.num_items())
    }

    pub fn latent_dim(&self) -> usize {
        self.output.latent_dim()
    }

    pub fn num_items(&self) -> usize {
        self.output.num_items()
    }

    pub fn tensors(&self) -> [&Matrix; 7] {
        let c = &self.cell;
        [&c.wz, &c.uz, &c.wr, &c.ur, &c.w, &c.u, &self.output.wy]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 7] {
        let c = &mut self.cell;
        [&mut c.wz, &mut c.uz, &mut c.wr, &mut c.ur, &mut c.w, &mut c.u, &mut self.output.wy]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Checks that all shapes agree with `latent_dim` and `num_items`.
    pub fn validate(&self) -> Result<(), String> {
        self.cell.validate()?;
        let (d, m) = (self.cell.latent_dim(), self.cell.num_items());
        if self.output.wy.shape() != (m, d) {
            return Err(format!(
                "Wy has shape {:?}, expected ({m}, {d})",
                self.output.wy.shape()
            ));
        }
        Ok(())
    }
}
