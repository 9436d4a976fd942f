fn last_index(rows: usize, cols: usize, strides: (usize, usize)) -> usize {
    (rows - 1) * strides.0 + (cols - 1) * strides.1
}

#[allow(clippy::too_many_arguments)]
pub(super) fn check_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a_strides: (usize, usize),
    b_len: usize,
    b_strides: (usize, usize),
    c_len: usize,
    c_strides: (usize, usize),
) {
    assert!(m > 0 && k > 0 && n > 0, "gemm with empty dimension {m}x{k}x{n}");
    assert!(last_index(m, k, a_strides) < a_len, "gemm: lhs out of bounds");
    assert!(last_index(k, n, b_strides) < b_len, "gemm: rhs out of bounds");
    assert!(last_index(m, n, c_strides) < c_len, "gemm: output out of bounds");
}
