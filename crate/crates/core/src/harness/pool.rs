use std::ops::Range;

use crate::error::{Error, Result};
use crate::rope::CoordGrid;
use crate::tensor::{TokenBlock, TokenKind};

/// Input range feeding output cell `i` of an adaptive average pool:
/// `[floor(i * n_in / n_out), ceil((i + 1) * n_in / n_out))`.
pub fn adaptive_bin(i: usize, n_in: usize, n_out: usize) -> Range<usize> {
    let start = i * n_in / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    assert!(start < end, "empty pooling bin {i} for {n_in} -> {n_out}");
    start..end
}

/// For every output cell of a `(frames, rows, cols)` pool, the flat input
/// indices it averages.
pub fn pool_bins(input: [usize; 3], output: [usize; 3]) -> Result<Vec<Vec<usize>>> {
    if input.contains(&0) || output.contains(&0) {
        return Err(Error::ShapeMismatch(format!("cannot pool {input:?} to {output:?}")));
    }
    let [fi, ri, ci] = input;
    let [fo, ro, co] = output;
    let mut bins = Vec::with_capacity(fo * ro * co);
    for f in 0..fo {
        let fr = adaptive_bin(f, fi, fo);
        for r in 0..ro {
            let rr = adaptive_bin(r, ri, ro);
            for c in 0..co {
                let cr = adaptive_bin(c, ci, co);
                let mut bin = Vec::with_capacity(fr.len() * rr.len() * cr.len());
                for a in fr.clone() {
                    for b in rr.clone() {
                        bin.extend(cr.clone().map(|k| (a * ri + b) * ci + k));
                    }
                }
                bins.push(bin);
            }
        }
    }
    Ok(bins)
}

fn grid_of(block: &TokenBlock) -> Result<[usize; 3]> {
    block.grid.ok_or_else(|| Error::ShapeMismatch("features carry no (frames, rows, cols) grid".into()))
}

/// Adaptive average pooling of a gridded token block.
pub fn structure_pool(features: &TokenBlock, pool_shape: [usize; 3]) -> Result<TokenBlock> {
    let bins = pool_bins(grid_of(features)?, pool_shape)?;
    let dim = features.dim;
    let mut values = Vec::with_capacity(bins.len() * dim);
    let mut acc = vec![0f64; dim];
    for bin in &bins {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &t in bin {
            acc.iter_mut().zip(features.row(t)).for_each(|(a, &v)| *a += v as f64);
        }
        values.extend(acc.iter().map(|a| (a / bin.len() as f64) as f32));
    }
    TokenBlock::new(bins.len(), dim, values, vec![TokenKind::Pooled; bins.len()])?.with_grid(pool_shape)
}

/// Coordinates of pooled tokens: the mean coordinate of each bin.
pub fn pool_coords(grid: &CoordGrid, input: [usize; 3], output: [usize; 3]) -> Result<CoordGrid> {
    grid.check_tokens(input.iter().product())?;
    let bins = pool_bins(input, output)?;
    let mut coords = Vec::with_capacity(bins.len());
    let mut image = Vec::with_capacity(bins.len());
    for bin in &bins {
        let mut c = [0.0; 4];
        for &t in bin {
            (0..4).for_each(|d| c[d] += grid.coords[t][d]);
        }
        c.iter_mut().for_each(|v| *v /= bin.len() as f64);
        coords.push(c);
        image.push(grid.image[bin[0]]);
    }
    Ok(CoordGrid { kinds: vec![TokenKind::Pooled; bins.len()], coords, image, spatial: grid.spatial })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_and_overlap_as_expected() {
        let bins: Vec<_> = (0..12).map(|i| adaptive_bin(i, 30, 12)).collect();
        assert_eq!(bins[0], 0..3);
        assert_eq!(bins[1], 2..5);
        assert_eq!(bins[11], 27..30);
        assert_eq!((0..4).map(|i| adaptive_bin(i, 1, 4)).collect::<Vec<_>>(), vec![0..1; 4]);
        assert_eq!((0..2).map(|i| adaptive_bin(i, 4, 2)).collect::<Vec<_>>(), vec![0..2, 2..4]);
    }

    #[test]
    fn four_dynimgs_pool_to_576() {
        let block = TokenBlock::new(4 * 720, 1, vec![1.0; 2880], vec![TokenKind::Keyframe; 2880]).unwrap();
        let out = structure_pool(&block.with_grid([4, 30, 24]).unwrap(), [4, 12, 12]).unwrap();
        assert_eq!(out.tokens, 576);
        assert_eq!(out.grid, Some([4, 12, 12]));
    }

    #[test]
    fn identity_when_shapes_match() {
        let values: Vec<f32> = (0..2 * 3 * 4 * 2).map(|i| i as f32 * 0.5).collect();
        let block = TokenBlock::new(24, 2, values.clone(), vec![TokenKind::Keyframe; 24]).unwrap().with_grid([2, 3, 4]).unwrap();
        assert_eq!(structure_pool(&block, [2, 3, 4]).unwrap().values, values);
    }

    #[test]
    fn missing_grid_rejected() {
        let block = TokenBlock::new(4, 1, vec![0.0; 4], vec![TokenKind::Keyframe; 4]).unwrap();
        assert!(matches!(structure_pool(&block, [1, 2, 2]), Err(Error::ShapeMismatch(_))));
    }
}
