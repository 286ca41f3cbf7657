use std::sync::Arc;

use crate::error::Result;
use crate::tensor::{Graph, Var};

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Cross-entropy plus `lambda_dice` times the class-averaged soft Dice loss.
pub fn seg_loss(g: &mut Graph, logits: Var, labels: Arc<[u8]>, lambda_dice: f64) -> Result<Var> {
    let ce = g.cross_entropy(logits, labels.clone())?;
    if lambda_dice == 0.0 {
        return Ok(ce);
    }
    let probs = g.softmax_lastdim(logits)?;
    let dice = g.soft_dice(probs, labels, DICE_SMOOTH)?;
    let weighted = g.scale(dice, lambda_dice)?;
    g.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn pure_cross_entropy_when_lambda_is_zero() {
        let mut g = Graph::new();
        let logits = Tensor::new(vec![3, 2], vec![1.0, -1.0, 0.5, 0.2, -2.0, 0.0]).unwrap();
        let labels: Arc<[u8]> = Arc::from(vec![0u8, 1, 1]);
        let lv = g.constant(&logits);
        let loss = seg_loss(&mut g, lv, labels.clone(), 0.0).unwrap();
        let want: f64 = logits
            .data()
            .chunks(2)
            .zip(labels.iter())
            .map(|(row, &y)| {
                let z = row[0].exp() + row[1].exp();
                -(row[y as usize].exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.value(loss).data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn loss_vanishes_with_margin() {
        let labels: Arc<[u8]> = Arc::from(vec![0u8, 2, 1, 3]);
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut data = vec![0.0; 16];
            for (i, &y) in labels.iter().enumerate() {
                data[i * 4 + y as usize] = margin;
            }
            let mut g = Graph::new();
            let lv = g.constant(&Tensor::new(vec![4, 4], data).unwrap());
            let lv = seg_loss(&mut g, lv, labels.clone(), 0.3).unwrap();
            let loss = g.value(lv).data()[0];
            assert!(loss >= 0.0 && loss < last);
            last = loss;
        }
        assert!(last < 1e-12, "{last}");
    }

    #[test]
    fn invariant_under_pixel_shuffle() {
        let logits: Vec<f64> = (0..24).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let labels = vec![0u8, 1, 2, 3, 1, 0];
        let perm = [4usize, 2, 5, 0, 3, 1];
        let mut shuffled = vec![0.0; 24];
        let mut slabels = vec![0u8; 6];
        for (dst, &src) in perm.iter().enumerate() {
            shuffled[dst * 4..dst * 4 + 4].copy_from_slice(&logits[src * 4..src * 4 + 4]);
            slabels[dst] = labels[src];
        }
        let eval = |l: Vec<f64>, y: Vec<u8>| {
            let mut g = Graph::new();
            let lv = g.constant(&Tensor::new(vec![6, 4], l).unwrap());
            let loss = seg_loss(&mut g, lv, y.into(), 0.3).unwrap();
            g.value(loss).data()[0]
        };
        let a = eval(logits, labels);
        let b = eval(shuffled, slabels);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_a_data_error() {
        let mut g = Graph::new();
        let lv = g.constant(&Tensor::zeros(&[2, 4]));
        let err = seg_loss(&mut g, lv, Arc::from(vec![0u8, 7]), 0.3).unwrap_err();
        assert!(matches!(err, crate::Error::Data(_)));
    }
}
