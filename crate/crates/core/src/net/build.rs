use super::{propagate_shapes, refit_pools, LayerKind, LayerSpec, NetError, NetworkSpec, PoolStage};

/// Number of pooling layers in the TFEB (five max pools and the final average pool).
pub const TFEB_POOLS: usize = 6;

/// Filter counts of conv1..conv12 in Micro-ACDNet.
pub const MICRO_FILTERS: [usize; 12] = [7, 20, 10, 14, 22, 31, 35, 41, 51, 67, 69, 48];

const SFEB_KERNELS: [(usize, usize); 2] = [(9, 2), (5, 2)];

/// SFEB max-pool width: `w` divided by the number of 10 ms frames in the
/// input, rounded to nearest, at least 1.
pub fn sfeb_pool_size(i_len: usize, sr: usize, w: usize) -> Result<usize, NetError> {
    if i_len == 0 || sr == 0 || w == 0 {
        return Err(NetError::Config(format!(
            "sfeb pool needs positive i_len, sr and width (got {i_len}, {sr}, {w})"
        )));
    }
    // frames = (i_len / sr) * 1000 / 10 = 100 * i_len / sr
    let frames = 100.0 * i_len as f64 / sr as f64;
    Ok(((w as f64 / frames).round() as usize).max(1))
}

/// Per-axis kernel sequence: 2 while the extent is at least 2 and pools
/// remain, 1 once the extent is 1, and the last pool takes whatever is left.
fn axis_kernels(x0: usize, n: usize) -> Vec<usize> {
    let mut x = x0;
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let k = if i == n {
            x
        } else if x >= 2 {
            2
        } else {
            1
        };
        out.push(k);
        x /= k;
    }
    out
}

/// TFEB pool kernels `(kh, kw)` for a TFEB input of height `h0` and width `w0`.
pub fn tfeb_pool_sizes(h0: usize, w0: usize, n: usize) -> Vec<(usize, usize)> {
    if h0 == 0 || w0 == 0 || n == 0 {
        return Vec::new();
    }
    axis_kernels(h0, n).into_iter().zip(axis_kernels(w0, n)).collect()
}

fn conv(name: String, filters: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv {
            filters,
            kernel,
            stride,
            padding,
        },
    )
}

fn conv_block(layers: &mut Vec<LayerSpec>, idx: usize, filters: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) {
    layers.push(conv(format!("conv{idx}"), filters, kernel, stride, padding));
    layers.push(LayerSpec::new(format!("bn{idx}"), LayerKind::BatchNorm));
    layers.push(LayerSpec::new(format!("relu{idx}"), LayerKind::Relu));
}

/// ACDNet layout with explicit conv1..conv12 filter counts.
///
/// TFEB 3×3 convolutions use one row/column of zero padding so that only
/// the pools change the feature-map extent.
pub fn build_with_filters(i_len: usize, sr: usize, n_cls: usize, x: usize, filters: &[usize; 12]) -> Result<NetworkSpec, NetError> {
    if n_cls == 0 || x == 0 {
        return Err(NetError::Config("n_cls and x must be positive".into()));
    }
    if let Some(i) = filters.iter().position(|&f| f == 0) {
        return Err(NetError::Config(format!("conv{} has zero filters", i + 1)));
    }
    let mut w = i_len;
    for (i, &(k, s)) in SFEB_KERNELS.iter().enumerate() {
        if w < k {
            return Err(NetError::Shape {
                layer: format!("conv{}", i + 1),
                reason: format!("input width {w} shorter than kernel {k}"),
            });
        }
        w = (w - k) / s + 1;
    }
    let sfeb_ps = sfeb_pool_size(i_len, sr, w)?;

    let mut layers = Vec::new();
    conv_block(&mut layers, 1, filters[0], (1, 9), (1, 2), (0, 0));
    conv_block(&mut layers, 2, filters[1], (1, 5), (1, 2), (0, 0));
    layers.push(LayerSpec::new(
        "maxpool1",
        LayerKind::MaxPool {
            kernel: (1, sfeb_ps),
            stage: PoolStage::Sfeb,
        },
    ));
    layers.push(LayerSpec::new("swapaxes", LayerKind::SwapAxes));
    for (i, &f) in filters.iter().enumerate().take(11).skip(2) {
        conv_block(&mut layers, i + 1, f, (3, 3), (1, 1), (1, 1));
    }
    layers.push(LayerSpec::new("dropout", LayerKind::Dropout { rate: 0.2 }));
    conv_block(&mut layers, 12, filters[11], (1, 1), (1, 1), (0, 0));
    layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
    layers.push(LayerSpec::new("dense1", LayerKind::Dense { units: n_cls }));
    layers.push(LayerSpec::new("softmax", LayerKind::Softmax));

    let spec = refit_pools(&NetworkSpec {
        i_len,
        sr,
        n_cls,
        x,
        layers,
    })?;
    propagate_shapes(&spec)?;
    Ok(spec)
}

/// ACDNet with base width `x`: conv1 = x, conv2 = 8x, conv3 = 4x, then
/// pairs of 8x, 16x, 32x, 64x and conv12 = n_cls.
pub fn build_acdnet(i_len: usize, sr: usize, n_cls: usize, x: usize) -> Result<NetworkSpec, NetError> {
    let f = [
        x,
        x * 8,
        x * 4,
        x * 8,
        x * 8,
        x * 16,
        x * 16,
        x * 32,
        x * 32,
        x * 64,
        x * 64,
        n_cls,
    ];
    build_with_filters(i_len, sr, n_cls, x, &f)
}

/// Micro-ACDNet: the 80%-pruned ACDNet for 30,225-sample inputs at 20 kHz, 50 classes.
pub fn micro_acdnet() -> NetworkSpec {
    build_with_filters(30_225, 20_000, 50, 8, &MICRO_FILTERS).expect("micro layout is feasible")
}
