use candle_core::{DType, Tensor};

use super::layers::{dropout, leaky_relu, max_pool2, softmax, BatchNorm, Conv, Ctx, Linear};
use super::params::ParamStore;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv,
    bn: BatchNorm,
    pool: bool,
}

#[derive(Debug, Clone)]
pub struct Disentangler {
    fc0: Linear,
    bn0: BatchNorm,
    fc1: Linear,
    bn1: BatchNorm,
    dropout: f64,
}

impl Disentangler {
    fn new(store: &mut ParamStore, prefix: &str, spec: &NetworkSpec) -> Result<Self> {
        Ok(Self {
            fc0: Linear::new(store, &format!("{prefix}.fc0"), spec.flat_dim(), spec.disentangler_hidden)?,
            bn0: BatchNorm::new(store, &format!("{prefix}.bn0"), spec.disentangler_hidden)?,
            fc1: Linear::new(store, &format!("{prefix}.fc1"), spec.disentangler_hidden, spec.latent_dim)?,
            bn1: BatchNorm::new(store, &format!("{prefix}.bn1"), spec.latent_dim)?,
            dropout: spec.dropout,
        })
    }

    pub fn forward(&self, f_g: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let h = self.bn0.forward(&self.fc0.forward(f_g)?, ctx)?.relu()?;
        let h = dropout(&h, self.dropout, ctx)?;
        Ok(self.bn1.forward(&self.fc1.forward(&h)?, ctx)?.relu()?)
    }
}

/// Generator output: flattened features plus post-ReLU maps of every conv layer.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub f_g: Tensor,
    pub conv_activations: Vec<Tensor>,
}

/// Everything one full forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub f_g: Tensor,
    pub f_ds: Tensor,
    pub f_cs: Tensor,
    pub conv_activations: Vec<Tensor>,
    /// `C(f_cs)`, rows sum to one.
    pub class_probs: Tensor,
    /// `DC(f_ds)`, rows sum to one.
    pub domain_probs: Tensor,
    /// `R(f_ds ++ f_cs)`.
    pub reconstruction: Tensor,
}

/// The full model: G, the two disentangler heads, C, DC, R and the MINE statistic network.
#[derive(Debug, Clone)]
pub struct Domain2VecNet {
    spec: NetworkSpec,
    store: ParamStore,
    convs: Vec<ConvBlock>,
    pub ds: Disentangler,
    pub cs: Disentangler,
    c_fc: Linear,
    c_bn: BatchNorm,
    dc_fc0: Linear,
    dc_fc1: Linear,
    r_fc: Linear,
    t_x: Linear,
    t_y: Linear,
    t_out: Linear,
}

impl Domain2VecNet {
    pub fn new(spec: &NetworkSpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let s = &mut store;
        let convs = spec
            .conv_layers()
            .map(|(i, a, b)| {
                Ok(ConvBlock {
                    conv: Conv::new(s, &format!("g.conv{i}"), a, b, spec.kernel)?,
                    bn: BatchNorm::new(s, &format!("g.bn{i}"), b)?,
                    pool: spec.pool_after[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Disentangler::new(s, "ds", spec)?;
        let cs = Disentangler::new(s, "cs", spec)?;
        let l = spec.latent_dim;
        let net = Self {
            convs,
            ds,
            cs,
            c_fc: Linear::new(s, "c.fc", l, spec.num_classes)?,
            c_bn: BatchNorm::new(s, "c.bn", spec.num_classes)?,
            dc_fc0: Linear::new(s, "dc.fc0", l, spec.domain_hidden)?,
            dc_fc1: Linear::new(s, "dc.fc1", spec.domain_hidden, spec.num_domains)?,
            r_fc: Linear::new(s, "r.fc", 2 * l, spec.flat_dim())?,
            t_x: Linear::new(s, "t.fc_x", l, spec.mine_hidden)?,
            t_y: Linear::new(s, "t.fc_y", l, spec.mine_hidden)?,
            t_out: Linear::new(s, "t.fc_out", spec.mine_hidden, 1)?,
            spec: spec.clone(),
            store,
        };
        debug_assert_eq!(net.store.param_count(), spec.param_count());
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let s = &self.spec;
        let dims = x.dims();
        let want = [s.in_channels, s.image_size, s.image_size];
        if dims.len() != 4 || dims[1..] != want {
            return Err(Error::Dimension {
                expected: format!("B x {} x {} x {}", want[0], want[1], want[2]),
                got: format!("{dims:?}"),
            });
        }
        Ok(())
    }

    fn check_latent(&self, x: &Tensor, what: &str) -> Result<()> {
        if x.rank() != 2 || x.dim(1)? != self.spec.latent_dim {
            return Err(Error::Dimension {
                expected: format!("{what}: B x {}", self.spec.latent_dim),
                got: format!("{:?}", x.dims()),
            });
        }
        Ok(())
    }

    pub fn generator(&self, x: &Tensor, ctx: &mut Ctx) -> Result<GeneratorOutput> {
        self.check_images(x)?;
        let mut h = x.clone();
        let mut acts = Vec::with_capacity(self.convs.len());
        for block in &self.convs {
            h = block.bn.forward(&block.conv.forward(&h)?, ctx)?.relu()?;
            acts.push(h.clone());
            if block.pool {
                h = max_pool2(&h)?;
            }
        }
        Ok(GeneratorOutput {
            f_g: h.flatten_from(1)?,
            conv_activations: acts,
        })
    }

    pub fn classify(&self, f: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        self.check_latent(f, "classifier input")?;
        softmax(&self.c_bn.forward(&self.c_fc.forward(f)?, ctx)?)
    }

    pub fn domain_classify(&self, f: &Tensor) -> Result<Tensor> {
        self.check_latent(f, "domain classifier input")?;
        let a = self.spec.leaky_slope;
        let h = leaky_relu(&self.dc_fc0.forward(f)?, a)?;
        softmax(&leaky_relu(&self.dc_fc1.forward(&h)?, a)?)
    }

    pub fn reconstruct(&self, f_ds: &Tensor, f_cs: &Tensor) -> Result<Tensor> {
        self.r_fc.forward(&Tensor::cat(&[f_ds, f_cs], 1)?)
    }

    /// Row-wise statistic `T(p, q)`, shape `B`.
    pub fn mine_statistic(&self, p: &Tensor, q: &Tensor) -> Result<Tensor> {
        self.check_latent(p, "mine p")?;
        self.check_latent(q, "mine q")?;
        let h = (self.t_x.forward(p)? + self.t_y.forward(q)?)?;
        let h = leaky_relu(&h, self.spec.leaky_slope)?;
        Ok(self.t_out.forward(&h)?.squeeze(1)?)
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<ForwardOutput> {
        let g = self.generator(x, ctx)?;
        let f_ds = self.ds.forward(&g.f_g, ctx)?;
        let f_cs = self.cs.forward(&g.f_g, ctx)?;
        Ok(ForwardOutput {
            class_probs: self.classify(&f_cs, ctx)?,
            domain_probs: self.domain_classify(&f_ds)?,
            reconstruction: self.reconstruct(&f_ds, &f_cs)?,
            f_g: g.f_g,
            f_ds,
            f_cs,
            conv_activations: g.conv_activations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            conv_channels: vec![2, 3],
            pool_after: vec![true, false],
            kernel: 3,
            image_size: 8,
            disentangler_hidden: 6,
            latent_dim: 4,
            domain_hidden: 5,
            mine_hidden: 3,
            ..NetworkSpec::desk(3, 2)
        }
    }

    #[test]
    fn param_count_matches_spec() {
        for spec in [tiny(), NetworkSpec::desk(10, 9)] {
            let net = Domain2VecNet::new(&spec, 0, DType::F32).unwrap();
            assert_eq!(net.store().param_count(), spec.param_count());
        }
    }

    #[test]
    fn desk_forward_shapes_and_normalization() {
        let spec = NetworkSpec::desk(10, 9);
        let net = Domain2VecNet::new(&spec, 1, DType::F32).unwrap();
        let x = Tensor::randn(0f32, 1.0, (3, 3, 32, 32), &Device::Cpu).unwrap();
        let out = net.forward(&x, &mut Ctx::eval()).unwrap();
        assert_eq!(out.f_g.dims(), &[3, 2048]);
        assert_eq!(out.f_ds.dims(), &[3, 256]);
        assert_eq!(out.f_cs.dims(), &[3, 256]);
        assert_eq!(out.class_probs.dims(), &[3, 10]);
        assert_eq!(out.domain_probs.dims(), &[3, 9]);
        assert_eq!(out.reconstruction.dims(), &[3, 2048]);
        assert_eq!(out.conv_activations[0].dims(), &[3, 16, 32, 32]);
        assert_eq!(out.conv_activations[2].dims(), &[3, 32, 8, 8]);
        for row in out.class_probs.to_vec2::<f32>().unwrap() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_image_gives_finite_outputs() {
        let net = Domain2VecNet::new(&NetworkSpec::desk(10, 9), 2, DType::F32).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let out = net.forward(&x, &mut Ctx::eval()).unwrap();
        for t in [
            &out.f_g,
            &out.f_ds,
            &out.f_cs,
            &out.class_probs,
            &out.domain_probs,
            &out.reconstruction,
        ] {
            assert!(t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn wrong_image_shape_is_dimension_error() {
        let net = Domain2VecNet::new(&tiny(), 0, DType::F32).unwrap();
        let x = Tensor::zeros((1, 3, 9, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x, &mut Ctx::eval()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn heads_have_distinct_parameters() {
        let net = Domain2VecNet::new(&tiny(), 0, DType::F32).unwrap();
        let a = net.store().get("ds.fc0.weight").unwrap().to_vec2::<f32>().unwrap();
        let b = net.store().get("cs.fc0.weight").unwrap().to_vec2::<f32>().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mine_statistic_zero_and_rowwise() {
        let net = Domain2VecNet::new(&tiny(), 0, DType::F64).unwrap();
        let z = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
        let t = net.mine_statistic(&z, &z).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(t, vec![0.0, 0.0]);

        let p = Tensor::randn(0f64, 1.0, (5, 4), &Device::Cpu).unwrap();
        let q = Tensor::randn(0f64, 1.0, (5, 4), &Device::Cpu).unwrap();
        let full = net.mine_statistic(&p, &q).unwrap().to_vec1::<f64>().unwrap();
        let perm = Tensor::new(&[4u32, 2, 0, 1, 3], &Device::Cpu).unwrap();
        let shuffled = net
            .mine_statistic(&p.index_select(&perm, 0).unwrap(), &q.index_select(&perm, 0).unwrap())
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for (i, &j) in [4usize, 2, 0, 1, 3].iter().enumerate() {
            assert!((shuffled[i] - full[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = Domain2VecNet::new(&tiny(), 4, DType::F32).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let a = net.forward(&x, &mut Ctx::eval()).unwrap().f_ds.to_vec2::<f32>().unwrap();
        let b = net.forward(&x, &mut Ctx::eval()).unwrap().f_ds.to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
