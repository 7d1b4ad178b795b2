use super::Network;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Real, Tensor};

/// Pixels set in a strict majority of `masks`. Two voters split 1/1 drop the pixel.
pub fn majority_vote(masks: &[&Mask]) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Parameter("majority vote over zero masks".into()))?;
    if masks.iter().any(|m| !m.same_dims(first)) {
        return Err(Error::dim("majority vote over masks of different sizes"));
    }
    let n = masks.len();
    Ok(Mask::from_fn(first.height(), first.width(), |y, x| {
        2 * masks.iter().filter(|m| m.get(y, x)).count() > n
    }))
}

/// Majority vote of every network's certain-pixel masks, per batch item and
/// organ channel.
pub fn ensemble_predict<T: Real>(nets: &mut [Network<T>], batch: &Tensor<T>, epsilon: f64) -> Result<Vec<Vec<Mask>>> {
    let first = nets
        .first()
        .ok_or_else(|| Error::Parameter("ensemble needs at least one network".into()))?
        .config()
        .clone();
    for net in nets.iter() {
        let c = net.config();
        if c.input_resolution != first.input_resolution || c.head != first.head || c.num_classes != first.num_classes {
            return Err(Error::Parameter(format!(
                "ensemble members disagree: {} {:?}x{} at {} vs {} {:?}x{} at {}",
                first.arch,
                first.head,
                first.num_classes,
                first.input_resolution,
                c.arch,
                c.head,
                c.num_classes,
                c.input_resolution
            )));
        }
    }
    let votes = nets
        .iter_mut()
        .map(|net| net.predict_masks(batch, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let items = votes[0].len();
    let classes = votes[0].first().map_or(0, Vec::len);
    (0..items)
        .map(|b| {
            (0..classes)
                .map(|l| majority_vote(&votes.iter().map(|v| &v[b][l]).collect::<Vec<_>>()))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_voter_truth_table() {
        for (a, b) in [(false, false), (false, true), (true, false), (true, true)] {
            let ma = Mask::from_fn(1, 1, |_, _| a);
            let mb = Mask::from_fn(1, 1, |_, _| b);
            assert_eq!(majority_vote(&[&ma, &mb]).unwrap().get(0, 0), a && b);
        }
    }

    #[test]
    fn three_voters() {
        let on = Mask::from_fn(1, 1, |_, _| true);
        let off = Mask::empty(1, 1);
        assert!(majority_vote(&[&on, &on, &off]).unwrap().get(0, 0));
        assert!(!majority_vote(&[&on, &off, &off]).unwrap().get(0, 0));
        assert!(majority_vote(&[]).is_err());
    }
}
