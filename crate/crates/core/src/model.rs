//! View-specific autoencoders and the multiview forward pass.
//!
//! Each view `v` owns an encoder `[d_v, h.., D_out]` and a mirrored decoder
//! `[D_out, ..h, d_v]`. The encoder output `Z` is the latent feature; its
//! row softmax `Y` is the class posterior over `D_out` latent classes. The
//! decoder reconstructs from `Z` with a linear output layer.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_mask, DropMask};
use crate::error::{HcnError, Result};
use crate::nn::{Activation, Mlp, MlpTrace, Parameterized};
use crate::numerics::{softmax_rows, DenseMatrix};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Hidden widths of the encoder; the decoder uses them reversed.
    pub hidden: Vec<usize>,
    /// Latent width, which is also the number of latent classes.
    pub d_out: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: vec![1024, 1024, 1024],
            d_out: 64,
            activation: Activation::Relu,
        }
    }
}

impl Architecture {
    pub fn encoder_dims(&self, d_v: usize) -> Vec<usize> {
        let mut dims = vec![d_v];
        dims.extend(&self.hidden);
        dims.push(self.d_out);
        dims
    }

    pub fn decoder_dims(&self, d_v: usize) -> Vec<usize> {
        let mut dims = self.encoder_dims(d_v);
        dims.reverse();
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewAutoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl ViewAutoencoder {
    pub fn new<R: rand::Rng + ?Sized>(d_v: usize, arch: &Architecture, rng: &mut R) -> Result<Self> {
        let encoder = Mlp::new(&arch.encoder_dims(d_v), arch.activation, rng)?;
        let decoder = Mlp::new(&arch.decoder_dims(d_v), arch.activation, rng)?;
        Ok(ViewAutoencoder { encoder, decoder })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() || decoder.output_dim() != encoder.input_dim() {
            return Err(HcnError::InvalidArgument(format!(
                "encoder {:?} and decoder {:?} do not mirror each other",
                encoder.dims(),
                decoder.dims()
            )));
        }
        Ok(ViewAutoencoder { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Pre-softmax latent features `Z`.
    pub fn encode(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_width("encode", x, self.input_dim())?;
        self.encoder.predict(x)
    }

    pub fn decode(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_width("decode", z, self.latent_dim())?;
        self.decoder.predict(z)
    }

    fn check_width(&self, op: &'static str, x: &DenseMatrix, width: usize) -> Result<()> {
        if x.cols() != width {
            return Err(HcnError::ShapeMismatch {
                op,
                left: x.shape(),
                right: (x.rows(), width),
            });
        }
        Ok(())
    }
}

impl Parameterized for ViewAutoencoder {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.encoder.visit_params(f);
        self.decoder.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.encoder.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }
}

/// Class posteriors: the row softmax of the latent features.
pub fn class_probs(z: &DenseMatrix) -> DenseMatrix {
    softmax_rows(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HcnModel {
    views: Vec<ViewAutoencoder>,
    arch: Architecture,
}

impl HcnModel {
    /// Initializes one autoencoder per view; view `v` draws from init stream `v`.
    pub fn new(view_dims: &[usize], arch: &Architecture, seed: u64) -> Result<Self> {
        if view_dims.len() < 2 {
            return Err(HcnError::TooFewViews(view_dims.len()));
        }
        if arch.d_out == 0 {
            return Err(HcnError::InvalidArgument("latent width must be positive".into()));
        }
        let views = view_dims
            .iter()
            .enumerate()
            .map(|(v, &d)| ViewAutoencoder::new(d, arch, &mut stream_rng(seed, Stream::Init, v as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(HcnModel {
            views,
            arch: arch.clone(),
        })
    }

    pub fn from_views(views: Vec<ViewAutoencoder>, arch: Architecture) -> Result<Self> {
        if views.len() < 2 {
            return Err(HcnError::TooFewViews(views.len()));
        }
        for (v, view) in views.iter().enumerate() {
            let d = view.input_dim();
            if view.encoder.dims() != arch.encoder_dims(d) || view.decoder.dims() != arch.decoder_dims(d) {
                return Err(HcnError::InvalidArgument(format!(
                    "view {v} layers {:?} do not follow the architecture {:?}",
                    view.encoder.dims(),
                    arch
                )));
            }
            if view.encoder.activation != arch.activation || view.decoder.activation != arch.activation {
                return Err(HcnError::InvalidArgument(format!("view {v} activation differs from the architecture")));
            }
        }
        Ok(HcnModel { views, arch })
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn d_out(&self) -> usize {
        self.arch.d_out
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(ViewAutoencoder::input_dim).collect()
    }

    pub fn view(&self, v: usize) -> &ViewAutoencoder {
        &self.views[v]
    }

    pub fn views(&self) -> &[ViewAutoencoder] {
        &self.views
    }

    /// `Z^(v)` for every view, without augmentation.
    pub fn encode_all(&self, views: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        self.check_batch(views)?;
        self.views.iter().zip(views).map(|(ae, x)| ae.encode(x)).collect()
    }

    fn check_batch(&self, batch: &[DenseMatrix]) -> Result<()> {
        if batch.len() != self.views.len() {
            return Err(HcnError::InvalidArgument(format!(
                "model has {} views, batch has {}",
                self.views.len(),
                batch.len()
            )));
        }
        let n = batch[0].rows();
        for (v, x) in batch.iter().enumerate() {
            if x.rows() != n {
                return Err(HcnError::MisalignedViews {
                    view: v,
                    expected: n,
                    found: x.rows(),
                });
            }
        }
        Ok(())
    }

    /// Accumulates parameter gradients from upstream gradients on the bundle's
    /// `Z`, `Z_aug`, `X̂` and `X̂_aug`. Decoder input gradients flow back into the encoders.
    pub fn backward(&mut self, bundle: &ForwardBundle, grads: &BundleGradients) -> Result<()> {
        if bundle.views.len() != self.views.len() || grads.views.len() != self.views.len() {
            return Err(HcnError::InvalidArgument("bundle does not match the model".into()));
        }
        for ((ae, pass), g) in self.views.iter_mut().zip(&bundle.views).zip(&grads.views) {
            let mut dz = g.dz.clone();
            let mut dz_aug = g.dz_aug.clone();
            if let Some(d) = ae.decoder.backward(&pass.dec, &g.dx_hat, true)? {
                dz.add_assign(&d)?;
            }
            if let Some(d) = ae.decoder.backward(&pass.dec_aug, &g.dx_hat_aug, true)? {
                dz_aug.add_assign(&d)?;
            }
            ae.encoder.backward(&pass.enc, &dz, false)?;
            ae.encoder.backward(&pass.enc_aug, &dz_aug, false)?;
        }
        Ok(())
    }
}

impl Parameterized for HcnModel {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        for v in &self.views {
            v.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for v in &mut self.views {
            v.visit_params_mut(f);
        }
    }
}

/// One view's tensors from a forward pass.
#[derive(Debug, Clone)]
pub struct ViewPass {
    pub x_aug: DenseMatrix,
    pub y: DenseMatrix,
    pub y_aug: DenseMatrix,
    enc: MlpTrace,
    enc_aug: MlpTrace,
    dec: MlpTrace,
    dec_aug: MlpTrace,
}

impl ViewPass {
    pub fn z(&self) -> &DenseMatrix {
        self.enc.output()
    }

    pub fn z_aug(&self) -> &DenseMatrix {
        self.enc_aug.output()
    }

    pub fn x_hat(&self) -> &DenseMatrix {
        self.dec.output()
    }

    pub fn x_hat_aug(&self) -> &DenseMatrix {
        self.dec_aug.output()
    }
}

/// All views of one forward pass; row `i` is the same sample in every tensor.
#[derive(Debug, Clone)]
pub struct ForwardBundle {
    pub views: Vec<ViewPass>,
}

impl ForwardBundle {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn batch_size(&self) -> usize {
        self.views.first().map_or(0, |v| v.y.rows())
    }

    pub fn z(&self) -> Vec<&DenseMatrix> {
        self.views.iter().map(ViewPass::z).collect()
    }

    pub fn z_aug(&self) -> Vec<&DenseMatrix> {
        self.views.iter().map(ViewPass::z_aug).collect()
    }

    pub fn y(&self) -> Vec<&DenseMatrix> {
        self.views.iter().map(|v| &v.y).collect()
    }

    pub fn y_aug(&self) -> Vec<&DenseMatrix> {
        self.views.iter().map(|v| &v.y_aug).collect()
    }
}

/// Encodes, classifies and decodes both the original and the masked batch of every view.
pub fn forward_all(model: &HcnModel, batch: &[DenseMatrix], masks: &[DropMask]) -> Result<ForwardBundle> {
    model.check_batch(batch)?;
    if masks.len() != batch.len() {
        return Err(HcnError::InvalidArgument(format!(
            "{} masks for {} views",
            masks.len(),
            batch.len()
        )));
    }
    let mut views = Vec::with_capacity(batch.len());
    for ((ae, x), mask) in model.views.iter().zip(batch).zip(masks) {
        ae.check_width("forward_all", x, ae.input_dim())?;
        let x_aug = apply_mask(x, mask)?;
        let enc = ae.encoder.forward(x)?;
        let enc_aug = ae.encoder.forward(&x_aug)?;
        let dec = ae.decoder.forward(enc.output())?;
        let dec_aug = ae.decoder.forward(enc_aug.output())?;
        views.push(ViewPass {
            y: class_probs(enc.output()),
            y_aug: class_probs(enc_aug.output()),
            x_aug,
            enc,
            enc_aug,
            dec,
            dec_aug,
        });
    }
    Ok(ForwardBundle { views })
}

/// Upstream gradients for one view's bundle tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGradients {
    pub dz: DenseMatrix,
    pub dz_aug: DenseMatrix,
    pub dx_hat: DenseMatrix,
    pub dx_hat_aug: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleGradients {
    pub views: Vec<ViewGradients>,
}

impl BundleGradients {
    pub fn zeros_like(bundle: &ForwardBundle) -> Self {
        let views = bundle
            .views
            .iter()
            .map(|p| {
                let (n, k) = p.z().shape();
                let d = p.x_hat().cols();
                ViewGradients {
                    dz: DenseMatrix::zeros(n, k),
                    dz_aug: DenseMatrix::zeros(n, k),
                    dx_hat: DenseMatrix::zeros(n, d),
                    dx_hat_aug: DenseMatrix::zeros(n, d),
                }
            })
            .collect();
        BundleGradients { views }
    }
}
