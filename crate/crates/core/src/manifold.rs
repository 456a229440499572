//! Plain reconstruction autoencoder for the next-state manifold.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::envdata::Dataset;
use crate::ndgrad::{Activation, AdamConfig, AdamState, Mlp, NdError, Tape};
use crate::norm::Standardizer;
use crate::rng;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("reconstruction loss diverged at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ManifoldError>;

#[derive(Clone, Debug, PartialEq)]
pub struct AeConfig {
    pub d_m: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            d_m: 2,
            hidden: vec![64, 64, 64],
            epochs: 100,
            lr: 1e-3,
            batch: 256,
            seed: 0,
        }
    }
}

/// Per-epoch mean reconstruction loss `||s' - f_d(f_e(s'))||^2` in raw units.
#[derive(Clone, Debug, Default)]
pub struct AeTrainLog {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

/// Encoder and decoder acting on raw next states; both nets see the
/// z-scored state internally.
#[derive(Clone, Debug)]
pub struct AutoEncoder {
    encoder: Mlp,
    decoder: Mlp,
    norm: Standardizer,
}

impl AutoEncoder {
    pub fn new(ds: usize, cfg: &AeConfig, norm: Standardizer, rng: &mut rng::Stream) -> Result<Self> {
        if cfg.d_m == 0 || cfg.d_m > ds {
            return Err(ManifoldError::Config(format!("need 0 < d_m <= ds, got d_m={} ds={ds}", cfg.d_m)));
        }
        let mut enc_dims = vec![ds];
        enc_dims.extend(&cfg.hidden);
        enc_dims.push(cfg.d_m);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        Ok(Self {
            encoder: Mlp::new(&enc_dims, Activation::Relu, rng)?,
            decoder: Mlp::new(&dec_dims, Activation::Relu, rng)?,
            norm,
        })
    }

    pub fn zeros(ds: usize, d_m: usize, hidden: &[usize]) -> Result<Self> {
        let mut dims = vec![ds];
        dims.extend(hidden);
        dims.push(d_m);
        let rev: Vec<usize> = dims.iter().rev().copied().collect();
        Ok(Self {
            encoder: Mlp::zeros(&dims, Activation::Relu)?,
            decoder: Mlp::zeros(&rev, Activation::Relu)?,
            norm: Standardizer::identity(ds),
        })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, norm: Standardizer) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() {
            return Err(ManifoldError::DimensionMismatch {
                expected: encoder.output_dim(),
                got: decoder.input_dim(),
            });
        }
        if encoder.input_dim() != decoder.output_dim() || norm.dim() != encoder.input_dim() {
            return Err(ManifoldError::Config("encoder/decoder/normalizer state dims disagree".into()));
        }
        if encoder.output_dim() > encoder.input_dim() {
            return Err(ManifoldError::Config("d_m exceeds state dimension".into()));
        }
        Ok(Self { encoder, decoder, norm })
    }

    pub fn ds(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn d_m(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn normalizer(&self) -> &Standardizer {
        &self.norm
    }

    fn check(&self, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(ManifoldError::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    pub fn encode_batch(&self, s_next: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(s_next.ncols(), self.ds())?;
        Ok(self.encoder.predict(self.norm.apply(s_next).view())?)
    }

    pub fn decode_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(z.ncols(), self.d_m())?;
        Ok(self.norm.invert(self.decoder.predict(z)?.view()))
    }

    pub fn encode(&self, s_next: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, s_next.len()), s_next).expect("slice");
        Ok(self.encode_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, z.len()), z).expect("slice");
        Ok(self.decode_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn reconstruct_batch(&self, s_next: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.decode_batch(self.encode_batch(s_next)?.view())
    }

    /// Decoded raw states plus the tape needed by [`AutoEncoder::decode_vjp`].
    pub fn decode_tape(&self, z: ArrayView2<f64>) -> Result<(Array2<f64>, Tape<'_>)> {
        self.check(z.ncols(), self.d_m())?;
        let (y, tape) = self.decoder.forward(z)?;
        Ok((self.norm.invert(y.view()), tape))
    }

    /// Gradient w.r.t. `z` given the gradient w.r.t. the decoded raw state.
    pub fn decode_vjp(&self, tape: &Tape<'_>, g_raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        let g = &g_raw * &self.norm.std;
        Ok(tape.backward_input(g.view())?)
    }

    pub fn encode_tape(&self, s_next: ArrayView2<f64>) -> Result<(Array2<f64>, Tape<'_>)> {
        self.check(s_next.ncols(), self.ds())?;
        Ok(self.encoder.forward(self.norm.apply(s_next).view())?)
    }

    /// Gradient w.r.t. the raw state given the gradient w.r.t. the code.
    pub fn encode_vjp(&self, tape: &Tape<'_>, g_z: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.norm.pullback(tape.backward_input(g_z)?.view()))
    }

    /// Mean over rows of the raw squared reconstruction error.
    pub fn reconstruction_loss(&self, s_next: ArrayView2<f64>) -> Result<f64> {
        let rec = self.reconstruct_batch(s_next)?;
        let err = (&rec - &s_next).mapv(|v| v * v).sum_axis(Axis(1));
        Ok(err.mean().unwrap_or(0.0))
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        ck.insert_mlp("ae.encoder", &self.encoder);
        ck.insert_mlp("ae.decoder", &self.decoder);
        ck.insert_array("ae.normalizer", &[2, self.ds()], &self.norm.to_flat());
        ck.set_meta("ae.d_m", self.d_m().to_string());
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        let (_, flat) = ck.array("ae.normalizer")?;
        let norm = Standardizer::from_flat(&flat).ok_or_else(|| ManifoldError::Config("normalizer".into()))?;
        Self::from_parts(ck.mlp("ae.encoder")?, ck.mlp("ae.decoder")?, norm)
    }
}

/// Seeded shuffle split into `(train, val)` index sets at 90/10.
pub fn split_indices(n: usize, rng: &mut rng::Stream) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = if n >= 2 { (n / 10).max(1) } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Trains on the dataset's next states.
pub fn train_autoencoder(data: &Dataset, cfg: &AeConfig) -> Result<(AutoEncoder, AeTrainLog)> {
    train_autoencoder_on(data.next_states().view(), cfg)
}

pub fn train_autoencoder_on(states: ArrayView2<f64>, cfg: &AeConfig) -> Result<(AutoEncoder, AeTrainLog)> {
    if states.nrows() == 0 {
        return Err(ManifoldError::EmptyDataset);
    }
    let ds = states.ncols();
    let mut rng = rng::substream(cfg.seed, "autoencoder", 0);
    let norm = Standardizer::fit(states);
    let mut ae = AutoEncoder::new(ds, cfg, norm.clone(), &mut rng)?;
    let (mut train_idx, val_idx) = split_indices(states.nrows(), &mut rng);
    let x = norm.apply(states);
    let x_val = states.select(Axis(0), &val_idx);
    let w = norm.std.mapv(|s| s * s);
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut opt_e = AdamState::for_mlp(&ae.encoder, adam_cfg);
    let mut opt_d = AdamState::for_mlp(&ae.decoder, adam_cfg);
    let mut log = AeTrainLog::default();
    let batch = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let (z, enc_tape) = ae.encoder.forward(xb.view())?;
            let (y, dec_tape) = ae.decoder.forward(z.view())?;
            let r = &y - &xb;
            let weighted = &r * &w;
            total += (&weighted * &r).sum();
            let seed = weighted * (2.0 / chunk.len() as f64);
            let gd = dec_tape.backward(seed.view())?;
            let ge = enc_tape.backward(gd.input.view())?;
            drop((enc_tape, dec_tape));
            opt_d.step_mlp(&mut ae.decoder, &gd)?;
            opt_e.step_mlp(&mut ae.encoder, &ge)?;
        }
        let train_loss = total / train_idx.len() as f64;
        if !train_loss.is_finite() {
            return Err(ManifoldError::Diverged(epoch));
        }
        log.train.push(train_loss);
        log.val.push(if val_idx.is_empty() {
            train_loss
        } else {
            ae.reconstruction_loss(x_val.view())?
        });
    }
    Ok((ae, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdata::{gen_didactic_dataset, EmbeddedSpace};
    use ndarray::array;

    #[test]
    fn zero_autoencoder_maps_to_zero() {
        let ae = AutoEncoder::zeros(4, 2, &[8]).unwrap();
        assert_eq!(ae.encode(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(ae.decode(&[0.5, -1.0]).unwrap(), vec![0.0; 4]);
        assert!(matches!(ae.encode(&[1.0]), Err(ManifoldError::DimensionMismatch { .. })));
        assert!(matches!(ae.decode(&[1.0]), Err(ManifoldError::DimensionMismatch { .. })));
    }

    #[test]
    fn d_m_larger_than_state_rejected() {
        let x = Array2::zeros((10, 2));
        let cfg = AeConfig {
            d_m: 3,
            ..AeConfig::default()
        };
        assert!(matches!(train_autoencoder_on(x.view(), &cfg), Err(ManifoldError::Config(_))));
    }

    #[test]
    fn identity_recoverable_data() {
        let mut r = rng::stream(0);
        let x = Array2::from_shape_fn((512, 2), |_| rng::normal(&mut r));
        let mixed = x.dot(&array![[1.0, 0.3], [-0.2, 0.8]]);
        let cfg = AeConfig {
            d_m: 2,
            hidden: vec![32, 32],
            epochs: 150,
            lr: 3e-3,
            batch: 64,
            seed: 1,
        };
        let (ae, log) = train_autoencoder_on(mixed.view(), &cfg).unwrap();
        assert!(*log.train.last().unwrap() < 1e-3, "{:?}", log.train.last());
        assert!(ae.reconstruction_loss(mixed.view()).unwrap() < 1e-3);
    }

    #[test]
    fn trains_on_embedded_didactic_states() {
        let data = gen_didactic_dataset(1500, 2, 0.05).unwrap();
        let space = EmbeddedSpace::new(1, 1, 16, 16, 0).unwrap();
        let lifted = space.lift(&data).unwrap();
        let cfg = AeConfig {
            epochs: 40,
            hidden: vec![32, 32, 32],
            seed: 5,
            ..AeConfig::default()
        };
        let (ae, log) = train_autoencoder(&lifted, &cfg).unwrap();
        assert!(log.train.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(log.train.last() <= log.train.first());
        let rec = *log.val.last().unwrap();
        assert!(rec <= 2.0 * log.train.last().unwrap(), "{rec} vs {:?}", log.train.last());
        // same seed, same model
        let (ae2, _) = train_autoencoder(&lifted, &cfg).unwrap();
        assert_eq!(ae2.encoder().params(), ae.encoder().params());
    }

    #[test]
    fn decode_vjp_matches_finite_differences() {
        let mut r = rng::stream(3);
        let cfg = AeConfig {
            d_m: 2,
            hidden: vec![6, 5],
            ..AeConfig::default()
        };
        let norm = Standardizer {
            mean: array![0.1, -0.2, 0.3],
            std: array![0.5, 2.0, 1.5],
        };
        let ae = AutoEncoder::new(3, &cfg, norm, &mut r).unwrap();
        let z = array![[0.3, -0.4]];
        let c = array![[1.0, -2.0, 0.5]];
        let (_, tape) = ae.decode_tape(z.view()).unwrap();
        let g = ae.decode_vjp(&tape, c.view()).unwrap();
        let f = |zz: &[f64]| {
            let y = ae.decode(zz).unwrap();
            y.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        for k in 0..2 {
            let mut p = z.row(0).to_vec();
            let mut m = p.clone();
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[[0, k]]).abs() <= 1e-5 * fd.abs().max(1.0));
        }
        let s = array![[0.2, 0.9, -1.1]];
        let (_, et) = ae.encode_tape(s.view()).unwrap();
        let gz = array![[0.7, -0.3]];
        let gs = ae.encode_vjp(&et, gz.view()).unwrap();
        let h = |ss: &[f64]| {
            let z = ae.encode(ss).unwrap();
            z.iter().zip(gz.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        for k in 0..3 {
            let mut p = s.row(0).to_vec();
            let mut m = p.clone();
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (h(&p) - h(&m)) / 2e-6;
            assert!((fd - gs[[0, k]]).abs() <= 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng::stream(4);
        let ae = AutoEncoder::new(4, &AeConfig { d_m: 2, hidden: vec![8], ..AeConfig::default() }, Standardizer::identity(4), &mut r).unwrap();
        let mut ck = Checkpoint::new();
        ae.save(&mut ck);
        assert_eq!(ck.meta("ae.d_m"), Some("2"));
        let back = AutoEncoder::load(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        let a = ae.encode(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = back.encode(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
    }
}
