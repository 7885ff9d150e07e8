//! File output: CSV tables and content hashes.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::engine::Trajectory;

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Header lines (`# key=value`) followed by one row per grid time:
/// `t, x_1..x_d, girsanov_stoch, girsanov_quad`.
pub fn trajectory_csv(tr: &Trajectory, header: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in header {
        let _ = writeln!(s, "# {k}={v}");
    }
    s.push('t');
    for k in 1..=tr.dim {
        let _ = write!(s, ",x{k}");
    }
    s.push_str(",girsanov_stoch,girsanov_quad\n");
    for (i, t) in tr.times.iter().enumerate() {
        let _ = write!(s, "{t}");
        for v in tr.state(i) {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{},{}", tr.girsanov_stoch[i], tr.girsanov_quad[i]);
    }
    s
}

/// Named columns of equal length.
pub fn columns_csv(names: &[&str], cols: &[&[f64]]) -> String {
    let mut s = names.join(",");
    s.push('\n');
    let n = cols.iter().map(|c| c.len()).max().unwrap_or(0);
    for i in 0..n {
        let row: Vec<String> = cols.iter().map(|c| c.get(i).map(|v| v.to_string()).unwrap_or_default()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Dense matrix, one row per line.
pub fn matrix_csv(m: &nalgebra::DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn columns_layout() {
        assert_eq!(columns_csv(&["a", "b"], &[&[1.0, 2.0], &[0.5, 3.0]]), "a,b\n1,0.5\n2,3\n");
    }
}
