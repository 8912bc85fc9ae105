use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelScale {
    Reference,
    Desk,
}

/// Layer sizes for every component. Everything else is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    /// Max-pool (2x2) after conv layer `i`?
    pub pool_after: Vec<bool>,
    pub kernel: usize,
    pub disentangler_hidden: usize,
    pub latent_dim: usize,
    pub dropout: f64,
    pub domain_hidden: usize,
    pub mine_hidden: usize,
    pub leaky_slope: f64,
    pub num_classes: usize,
    pub num_domains: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Leaky,
    Softmax,
}

/// One row of the per-component layer table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub input: usize,
    pub output: usize,
    /// `(kernel, stride, padding)` for convolutions.
    pub conv: Option<(usize, usize, usize)>,
    pub batch_norm: bool,
    pub activation: Activation,
    pub max_pool: bool,
    /// Dropout applied to this layer's input.
    pub dropout: f64,
}

impl NetworkSpec {
    pub fn reference(num_classes: usize, num_domains: usize) -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            conv_channels: vec![64, 64, 128],
            pool_after: vec![true, true, false],
            kernel: 5,
            disentangler_hidden: 3072,
            latent_dim: 2048,
            dropout: 0.5,
            domain_hidden: 256,
            mine_hidden: 512,
            leaky_slope: 0.01,
            num_classes,
            num_domains,
        }
    }

    pub fn desk(num_classes: usize, num_domains: usize) -> Self {
        Self {
            conv_channels: vec![16, 16, 32],
            disentangler_hidden: 384,
            latent_dim: 256,
            domain_hidden: 64,
            mine_hidden: 64,
            ..Self::reference(num_classes, num_domains)
        }
    }

    pub fn for_scale(scale: ModelScale, num_classes: usize, num_domains: usize) -> Self {
        match scale {
            ModelScale::Reference => Self::reference(num_classes, num_domains),
            ModelScale::Desk => Self::desk(num_classes, num_domains),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("network spec: {m}")));
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.pool_after.len() {
            return bad("conv_channels and pool_after must be non-empty and equally long");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        let pools = self.pool_after.iter().filter(|&&p| p).count() as u32;
        if self.image_size % (1 << pools) != 0 {
            return bad("image size not divisible by pooling");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.num_classes < 2 || self.num_domains < 1 {
            return bad("need at least 2 classes and 1 domain");
        }
        Ok(())
    }

    /// Spatial side length after the conv stack.
    pub fn final_side(&self) -> usize {
        let pools = self.pool_after.iter().filter(|&&p| p).count();
        self.image_size >> pools
    }

    /// Dimension of the flattened generator output f_G.
    pub fn flat_dim(&self) -> usize {
        let side = self.final_side();
        self.conv_channels.last().copied().unwrap_or(0) * side * side
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        std::iter::once(self.in_channels)
            .chain(self.conv_channels.iter().copied())
            .zip(self.conv_channels.iter().copied())
            .enumerate()
            .map(|(i, (a, b))| (i, a, b))
    }

    /// Per-component layer table in forward order.
    pub fn layers(&self) -> Vec<LayerDesc> {
        let lin = |name: String, input, output, batch_norm, activation, dropout| LayerDesc {
            name,
            kind: LayerKind::Linear,
            input,
            output,
            conv: None,
            batch_norm,
            activation,
            max_pool: false,
            dropout,
        };
        let mut out: Vec<LayerDesc> = self
            .conv_layers()
            .map(|(i, a, b)| LayerDesc {
                name: format!("g.conv{i}"),
                kind: LayerKind::Conv,
                input: a,
                output: b,
                conv: Some((self.kernel, 1, self.kernel / 2)),
                batch_norm: true,
                activation: Activation::Relu,
                max_pool: self.pool_after[i],
                dropout: 0.0,
            })
            .collect();
        for head in ["ds", "cs"] {
            out.push(lin(
                format!("{head}.fc0"),
                self.flat_dim(),
                self.disentangler_hidden,
                true,
                Activation::Relu,
                0.0,
            ));
            out.push(lin(
                format!("{head}.fc1"),
                self.disentangler_hidden,
                self.latent_dim,
                true,
                Activation::Relu,
                self.dropout,
            ));
        }
        out.push(lin(
            "c.fc".into(),
            self.latent_dim,
            self.num_classes,
            true,
            Activation::Softmax,
            0.0,
        ));
        out.push(lin(
            "dc.fc0".into(),
            self.latent_dim,
            self.domain_hidden,
            false,
            Activation::Leaky,
            0.0,
        ));
        out.push(lin(
            "dc.fc1".into(),
            self.domain_hidden,
            self.num_domains,
            false,
            Activation::Leaky,
            0.0,
        ));
        out.push(lin(
            "r.fc".into(),
            2 * self.latent_dim,
            self.flat_dim(),
            false,
            Activation::None,
            0.0,
        ));
        out.push(lin(
            "t.fc_x".into(),
            self.latent_dim,
            self.mine_hidden,
            false,
            Activation::None,
            0.0,
        ));
        out.push(lin(
            "t.fc_y".into(),
            self.latent_dim,
            self.mine_hidden,
            false,
            Activation::Leaky,
            0.0,
        ));
        out.push(lin("t.fc_out".into(), self.mine_hidden, 1, false, Activation::None, 0.0));
        out
    }

    /// Trainable parameter count implied by the layer table (weights, biases, BN affine).
    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| {
                let w = match l.conv {
                    Some((k, _, _)) => l.input * l.output * k * k,
                    None => l.input * l.output,
                };
                w + l.output + if l.batch_norm { 2 * l.output } else { 0 }
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_flat_dim_is_8192() {
        let s = NetworkSpec::reference(10, 54);
        s.validate().unwrap();
        // 128 channels on an 8x8 map after two 2x pools of 32x32.
        assert_eq!(s.final_side(), 8);
        assert_eq!(s.flat_dim(), 128 * 8 * 8);
        assert_eq!(s.flat_dim(), 8192);
    }

    #[test]
    fn reference_table_shapes() {
        let s = NetworkSpec::reference(10, 56);
        let l = s.layers();
        let dims: Vec<(&str, usize, usize)> = l.iter().map(|d| (d.name.as_str(), d.input, d.output)).collect();
        assert_eq!(
            dims,
            vec![
                ("g.conv0", 3, 64),
                ("g.conv1", 64, 64),
                ("g.conv2", 64, 128),
                ("ds.fc0", 8192, 3072),
                ("ds.fc1", 3072, 2048),
                ("cs.fc0", 8192, 3072),
                ("cs.fc1", 3072, 2048),
                ("c.fc", 2048, 10),
                ("dc.fc0", 2048, 256),
                ("dc.fc1", 256, 56),
                ("r.fc", 4096, 8192),
                ("t.fc_x", 2048, 512),
                ("t.fc_y", 2048, 512),
                ("t.fc_out", 512, 1),
            ]
        );
        assert_eq!(l[0].conv, Some((5, 1, 2)));
        assert!(l[4].dropout == 0.5 && l[3].dropout == 0.0);
    }

    #[test]
    fn desk_is_smaller() {
        let s = NetworkSpec::desk(10, 9);
        s.validate().unwrap();
        assert_eq!(s.flat_dim(), 32 * 8 * 8);
        assert!(s.param_count() < NetworkSpec::reference(10, 9).param_count() / 20);
    }

    #[test]
    fn invalid_specs() {
        let mut s = NetworkSpec::desk(10, 9);
        s.kernel = 4;
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::desk(10, 9);
        s.pool_after.pop();
        assert!(s.validate().is_err());
    }
}
