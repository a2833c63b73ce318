use crate::error::Result;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softmax(usize),
}

pub fn activation(tape: &mut Tape, kind: Activation, x: Var) -> Result<Var> {
    match kind {
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu(alpha) => tape.leaky_relu(x, alpha),
        Activation::Tanh => tape.tanh(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Softmax(axis) => tape.softmax(x, axis),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn run(kind: Activation, shape: Vec<usize>, data: Vec<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(shape, data).unwrap());
        let y = activation(&mut tape, kind, x).unwrap();
        tape.data(y).to_vec()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(run(Activation::Softmax(0), vec![2], vec![0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let out = run(Activation::Softmax(1), vec![2, 3], vec![1e3, -1e3, 999.0, -1e3, -1e3, -1e3]);
        for row in out.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn tanh_stays_open_interval() {
        let out = run(Activation::Tanh, vec![4], vec![-5.0, -0.1, 0.3, 5.0]);
        assert!(out.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn leaky_relu_slope() {
        assert_eq!(run(Activation::LeakyRelu(0.2), vec![2], vec![-1.0, 2.0]), vec![-0.2, 2.0]);
        assert_eq!(run(Activation::Relu, vec![2], vec![-1.0, 2.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn sigmoid_midpoint() {
        assert_eq!(run(Activation::Sigmoid, vec![1], vec![0.0]), vec![0.5]);
    }
}
