use candle_core::{Tensor, D};

use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1e-5;

/// Soft Dice on the foreground channel, averaged over the batch.
///
/// `logits` is `(B, 2, H, W)`; `target` is `(B, H, W)` holding 0/1.
pub fn dice_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 || target.dims() != [b, h, w] {
        return Err(Error::Shape(format!(
            "dice loss needs logits (B, 2, H, W) and target (B, H, W); got {:?} and {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    let p_fg = candle_nn::ops::softmax(logits, 1)?.narrow(1, 1, 1)?.reshape((b, h * w))?;
    let g = target.to_dtype(p_fg.dtype())?.reshape((b, h * w))?;
    let inter = (&p_fg * &g)?.sum(D::Minus1)?;
    let denom = ((p_fg.sum(D::Minus1)? + g.sum(D::Minus1)?)? + DICE_SMOOTH)?;
    let dice = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
    Ok(dice.affine(-1.0, 1.0)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    /// Logits whose foreground softmax is exactly `p` (up to float rounding).
    fn logits_for(p: &[f32], h: usize, w: usize) -> Tensor {
        let fg: Vec<f32> = p
            .iter()
            .map(|&q| if q >= 1.0 { 60.0 } else if q <= 0.0 { -60.0 } else { (q / (1.0 - q)).ln() })
            .collect();
        let bg = vec![0f32; p.len()];
        Tensor::from_vec([bg, fg].concat(), (1, 2, h, w), &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn examples() {
        let g: Vec<f32> = (0..16).map(|i| f32::from(i % 4 < 2)).collect();
        let target = Tensor::from_vec(g.clone(), (1, 4, 4), &Device::Cpu).unwrap();

        let perfect = scalar(dice_loss(&logits_for(&g, 4, 4), &target).unwrap());
        assert!(perfect <= 1e-4, "{perfect}");

        let inverse: Vec<f32> = g.iter().map(|v| 1.0 - v).collect();
        let worst = scalar(dice_loss(&logits_for(&inverse, 4, 4), &target).unwrap());
        assert!((worst - 1.0).abs() < 1e-4, "{worst}");

        let half = scalar(dice_loss(&logits_for(&[0.5; 16], 4, 4), &target).unwrap());
        let n = 16.0;
        let expected = 1.0 - (2.0 * 0.25 * n + DICE_SMOOTH) / (n + DICE_SMOOTH);
        assert!((half - expected).abs() < 1e-6, "{half} vs {expected}");
    }

    #[test]
    fn batch_mean_and_shape_errors() {
        let g1: Vec<f32> = (0..4).map(|i| f32::from(i < 2)).collect();
        let g2 = vec![1f32, 0.0, 0.0, 0.0];
        let l1 = logits_for(&g1, 2, 2);
        let l2 = logits_for(&[0.0, 1.0, 1.0, 1.0], 2, 2);
        let logits = Tensor::cat(&[&l1, &l2], 0).unwrap();
        let target = Tensor::from_vec([g1, g2].concat(), (2, 2, 2), &Device::Cpu).unwrap();
        let loss = scalar(dice_loss(&logits, &target).unwrap());
        assert!((loss - 0.5).abs() < 1e-4);
        assert!(matches!(
            dice_loss(&logits, &Tensor::zeros((2, 3, 2), candle_core::DType::F32, &Device::Cpu).unwrap()),
            Err(Error::Shape(_))
        ));
    }
}
