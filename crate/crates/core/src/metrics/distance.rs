use crate::synth::{Extents, Spacing};

/// One-dimensional squared distance transform `d[q] = min_p w2*(q-p)^2 + f[p]`
/// by the lower envelope of parabolas. Infinite entries of `f` never win.
fn envelope_1d(f: &[f64], w2: f64, d: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let key = |p: usize| f[p] + w2 * (p * p) as f64;
    for (q, fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        let mut s = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            s = (key(q) - key(p)) / (2.0 * w2 * (q - p) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                s = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        d.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q.abs_diff(p) as f64;
        *out = w2 * dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel centre to the
/// nearest seed voxel, with per-axis spacing. Infinite everywhere when there
/// are no seeds.
pub fn squared_edt(extents: Extents, seeds: &[[usize; 3]], spacing: Spacing) -> Vec<f64> {
    let Extents { depth, height, width } = extents;
    let mut g = vec![f64::INFINITY; extents.voxels()];
    for &[z, y, x] in seeds {
        g[extents.index(z, y, x)] = 0.0;
    }
    let longest = depth.max(height).max(width);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut zs) = (Vec::with_capacity(longest), Vec::with_capacity(longest));

    // x: contiguous rows
    let wx = spacing.x * spacing.x;
    for row in g.chunks_mut(width) {
        line[..width].copy_from_slice(row);
        envelope_1d(&line[..width], wx, &mut out[..width], &mut v, &mut zs);
        row.copy_from_slice(&out[..width]);
    }
    let wy = spacing.y * spacing.y;
    for z in 0..depth {
        for x in 0..width {
            for y in 0..height {
                line[y] = g[extents.index(z, y, x)];
            }
            envelope_1d(&line[..height], wy, &mut out[..height], &mut v, &mut zs);
            for y in 0..height {
                g[extents.index(z, y, x)] = out[y];
            }
        }
    }
    let wz = spacing.z * spacing.z;
    for y in 0..height {
        for x in 0..width {
            for z in 0..depth {
                line[z] = g[extents.index(z, y, x)];
            }
            envelope_1d(&line[..depth], wz, &mut out[..depth], &mut v, &mut zs);
            for z in 0..depth {
                g[extents.index(z, y, x)] = out[z];
            }
        }
    }
    g
}

/// Distance in mm from each query voxel to its nearest target voxel.
pub fn directed_distances(
    extents: Extents,
    targets: &[[usize; 3]],
    queries: &[[usize; 3]],
    spacing: Spacing,
) -> Vec<f64> {
    let edt = squared_edt(extents, targets, spacing);
    queries
        .iter()
        .map(|&[z, y, x]| edt[extents.index(z, y, x)].sqrt())
        .collect()
}
