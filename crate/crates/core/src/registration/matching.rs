//! Brute-force Hamming matching and distance-based match filtering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::registration::features::Descriptor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: u32,
}

/// Nearest neighbour in `b` for every descriptor of `a`; ties go to the
/// lowest index in `b`.
pub fn match_bruteforce(a: &[Descriptor], b: &[Descriptor]) -> Result<Vec<Match>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::stage(
            Stage::Match,
            format!("cannot match {} descriptors against {}", a.len(), b.len()),
        ));
    }
    Ok(a.iter()
        .enumerate()
        .map(|(i, da)| {
            let mut best = Match {
                index_a: i,
                index_b: 0,
                distance: u32::MAX,
            };
            for (j, db) in b.iter().enumerate() {
                let d = da.hamming(db);
                if d < best.distance {
                    best.index_b = j;
                    best.distance = d;
                }
            }
            best
        })
        .collect())
}

/// Which end of the distance-sorted list `filter_matches` discards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropSide {
    /// Discard the largest distances (keep the best matches).
    #[default]
    Worst,
    /// Discard the smallest distances.
    Best,
}

/// Sorts ascending by distance (then by `index_a`) and removes
/// `ceil(n * drop_fraction)` matches from the chosen end.
pub fn filter_matches(matches: &[Match], drop_fraction: f64, side: DropSide) -> Result<Vec<Match>> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!("drop_fraction {drop_fraction} must be in [0, 1)")));
    }
    let mut sorted = matches.to_vec();
    sorted.sort_by_key(|m| (m.distance, m.index_a, m.index_b));
    // guard against 0.1 * 200 = 20.000000000000004 style rounding
    let drop = ((sorted.len() as f64 * drop_fraction) - 1e-9).ceil().max(0.0) as usize;
    let keep = sorted.len() - drop;
    Ok(match side {
        DropSide::Worst => sorted[..keep].to_vec(),
        DropSide::Best => sorted[drop..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(words: [u64; 4]) -> Descriptor {
        Descriptor(words)
    }

    fn with_distances(ds: &[u32]) -> Vec<Match> {
        ds.iter()
            .enumerate()
            .map(|(i, &distance)| Match {
                index_a: i,
                index_b: i,
                distance,
            })
            .collect()
    }

    #[test]
    fn identical_and_complement() {
        let x = d([0xdead_beef, 7, u64::MAX, 0]);
        let m = match_bruteforce(&[x], &[x.complement(), x]).unwrap();
        assert_eq!((m[0].index_b, m[0].distance), (1, 0));
        assert_eq!(x.hamming(&x.complement()), 256);
    }

    #[test]
    fn ties_take_the_lowest_index() {
        let x = d([0; 4]);
        let y = d([1, 0, 0, 0]);
        let z = d([2, 0, 0, 0]);
        let m = match_bruteforce(&[x], &[y, z]).unwrap();
        assert_eq!((m[0].index_b, m[0].distance), (0, 1));
    }

    #[test]
    fn empty_input_is_a_matching_error() {
        let x = d([0; 4]);
        assert!(matches!(
            match_bruteforce(&[], &[x]),
            Err(Error::Registration { stage: Stage::Match, .. })
        ));
        assert!(match_bruteforce(&[x], &[]).is_err());
    }

    #[test]
    fn drops_ten_percent_worst() {
        let ds: Vec<u32> = (0..200).map(|i| (i * 37 % 200) as u32).collect();
        assert_eq!(filter_matches(&with_distances(&ds), 0.1, DropSide::Worst).unwrap().len(), 180);

        let ds: Vec<u32> = vec![5, 9, 0, 3, 8, 1, 7, 2, 6, 4];
        let kept = filter_matches(&with_distances(&ds), 0.1, DropSide::Worst).unwrap();
        assert_eq!(kept.len(), 9);
        assert!(kept.iter().all(|m| m.distance != 9));
        assert!(kept.windows(2).all(|w| w[0].distance <= w[1].distance));

        let kept = filter_matches(&with_distances(&ds), 0.1, DropSide::Best).unwrap();
        assert!(kept.iter().all(|m| m.distance != 0));
    }

    #[test]
    fn zero_fraction_only_sorts() {
        let ds = [4, 2, 9, 2];
        let kept = filter_matches(&with_distances(&ds), 0.0, DropSide::Worst).unwrap();
        assert_eq!(kept.iter().map(|m| m.distance).collect::<Vec<_>>(), vec![2, 2, 4, 9]);
        assert_eq!(kept[0].index_a, 1);
        assert!(filter_matches(&kept, 1.0, DropSide::Worst).is_err());
    }

    #[test]
    fn ceil_of_fraction() {
        // 11 * 0.1 = 1.1 -> drop 2
        let ds: Vec<u32> = (0..11).collect();
        assert_eq!(filter_matches(&with_distances(&ds), 0.1, DropSide::Worst).unwrap().len(), 9);
    }
}
