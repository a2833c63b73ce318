use super::{join, Ctx, Init, ParamDecl};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tape, Var};

/// Square-kernel convolution settings.
///
/// Plain convolutions produce `floor((H + 2p - k) / s) + 1` rows; transpose
/// convolutions produce exactly `s · H` and derive the output padding that
/// makes this hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transpose: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, transpose: bool) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            transpose,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Stride-1 convolution that keeps the spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2, false)
    }

    /// Stride-2 convolution that halves the spatial size.
    pub fn down(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, 2, kernel / 2, false)
    }

    /// Stride-2 transpose convolution that doubles the spatial size.
    pub fn up(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, 2, kernel / 2, true)
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 3, 5].contains(&self.kernel) {
            return Err(Error::Config(format!("kernel size {} not in {{1,3,5}}", self.kernel)));
        }
        if ![1, 2].contains(&self.stride) {
            return Err(Error::Config(format!("stride {} not in {{1,2}}", self.stride)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("convolution with zero channels".into()));
        }
        if self.transpose && self.out_pad().is_none() {
            return Err(Error::Config(format!(
                "transpose conv k={} s={} p={} cannot scale size exactly by the stride",
                self.kernel, self.stride, self.padding
            )));
        }
        Ok(())
    }

    fn out_pad(&self) -> Option<usize> {
        let v = (self.stride + 2 * self.padding) as isize - self.kernel as isize;
        (v >= 0 && (v as usize) < self.stride).then_some(v as usize)
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            pad: self.padding,
            out_pad: if self.transpose { self.out_pad().unwrap_or(0) } else { 0 },
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.kernel;
        if self.transpose {
            vec![self.in_channels, self.out_channels, k, k]
        } else {
            vec![self.out_channels, self.in_channels, k, k]
        }
    }

    /// Output height/width for an input of size `size`.
    pub fn output_size(&self, size: usize) -> usize {
        if self.transpose {
            size * self.stride
        } else {
            (size + 2 * self.padding - self.kernel) / self.stride + 1
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn check_weight(tape: &Tape, spec: &ConvSpec, w: Var) -> Result<()> {
    let expected = spec.weight_shape();
    if tape.shape(w) != expected.as_slice() {
        return Err(Error::dim(
            "conv",
            format!("weight shape {:?} does not match spec {:?}", tape.shape(w), expected),
        ));
    }
    Ok(())
}

pub fn conv2d(tape: &mut Tape, x: Var, spec: &ConvSpec, w: Var, b: Option<Var>) -> Result<Var> {
    if spec.transpose {
        return Err(Error::Contract("conv2d called with a transpose spec".into()));
    }
    check_weight(tape, spec, w)?;
    tape.conv2d(x, w, b, spec.geometry())
}

pub fn conv2d_transpose(tape: &mut Tape, x: Var, spec: &ConvSpec, w: Var, b: Option<Var>) -> Result<Var> {
    if !spec.transpose {
        return Err(Error::Contract("conv2d_transpose called with a plain spec".into()));
    }
    check_weight(tape, spec, w)?;
    tape.conv2d_transpose(x, w, b, spec.geometry())
}

/// A convolution layer with weight `<prefix>.w` and optional bias `<prefix>.b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub prefix: String,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv {
    pub fn new(prefix: impl Into<String>, spec: ConvSpec) -> Self {
        Conv {
            prefix: prefix.into(),
            spec,
            bias: true,
        }
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>, std: f64) {
        out.push(ParamDecl::param(
            join(&self.prefix, "w"),
            self.spec.weight_shape(),
            Init::TruncatedNormal(std),
        ));
        if self.bias {
            out.push(ParamDecl::param(
                join(&self.prefix, "b"),
                vec![self.spec.out_channels],
                Init::Zeros,
            ));
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.var(&join(&self.prefix, "w"))?;
        let b = if self.bias {
            Some(ctx.var(&join(&self.prefix, "b"))?)
        } else {
            None
        };
        if self.spec.transpose {
            conv2d_transpose(ctx.tape, x, &self.spec, w, b)
        } else {
            conv2d(ctx.tape, x, &self.spec, w, b)
        }
    }

    pub fn param_count(&self) -> usize {
        self.spec.weight_shape().iter().product::<usize>() + if self.bias { self.spec.out_channels } else { 0 }
    }

    pub fn fan_in(&self) -> usize {
        self.spec.fan_in()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn spec_validation() {
        assert!(ConvSpec::new(1, 1, 4, 1, 0, false).is_err());
        assert!(ConvSpec::new(1, 1, 3, 3, 0, false).is_err());
        assert!(ConvSpec::up(8, 4, 3).is_ok());
        assert!(ConvSpec::new(8, 4, 3, 2, 0, true).is_err());
    }

    #[test]
    fn output_size_formulae() {
        assert_eq!(ConvSpec::down(1, 1, 3).unwrap().output_size(32), 16);
        assert_eq!(ConvSpec::down(1, 1, 5).unwrap().output_size(7), 4);
        assert_eq!(ConvSpec::same(1, 1, 5).unwrap().output_size(9), 9);
        for k in [1, 3, 5] {
            assert_eq!(ConvSpec::up(1, 1, k).unwrap().output_size(4), 8);
        }
    }

    #[test]
    fn identity_1x1_kernel_keeps_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 3).map(|v| f64::from(v) - 4.0).collect();
        let x = tape.constant(Tensor::new(vec![1, 2, 3, 3], data.clone()).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let spec = ConvSpec::same(2, 2, 1).unwrap();
        let y = conv2d(&mut tape, x, &spec, w, None).unwrap();
        assert_eq!(tape.data(y), data.as_slice());
    }

    #[test]
    fn all_ones_kernel_on_constant_image() {
        let mut tape = Tape::new();
        let c = 0.7;
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], c));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let spec = ConvSpec::same(1, 1, 3).unwrap();
        let y = conv2d(&mut tape, x, &spec, w, None).unwrap();
        let out = tape.data(y);
        assert!((out[2 * 5 + 2] - 9.0 * c).abs() < 1e-12);
        // corners see 4 in-bounds taps
        assert!((out[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn transpose_shape_and_bias_only_output() {
        let mut tape = Tape::new();
        let spec = ConvSpec::up(8, 4, 3).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let w = tape.constant(Tensor::full(&spec.weight_shape(), 0.3));
        let b = tape.constant(Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0]));
        let y = conv2d_transpose(&mut tape, x, &spec, w, Some(b)).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 8, 8]);
        for (i, &v) in tape.data(y).iter().enumerate() {
            assert_eq!(v, [1.0, -2.0, 0.5, 3.0][i / 64]);
        }
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let mut tape = Tape::new();
        let spec = ConvSpec::same(3, 2, 3).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros(&spec.weight_shape()));
        assert!(matches!(
            conv2d(&mut tape, x, &spec, w, None),
            Err(Error::Dimension { .. })
        ));
    }
}
