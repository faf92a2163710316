/// Panics unless a `rows x cols` strided view fits in a slice of length `len`.
pub(crate) fn check_extent(rows: usize, cols: usize, len: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(
        last < len,
        "gemm view {rows}x{cols} with strides ({rs}, {cs}) overruns slice of length {len}"
    );
}
