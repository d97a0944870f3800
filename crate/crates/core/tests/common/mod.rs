#![allow(dead_code)]

//! Shared helpers for the integration targets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Run the CLI in-process with string arguments.
pub fn cli<S: AsRef<str>>(args: &[S]) -> i32 {
    let mut v = vec!["dimscope".to_string()];
    v.extend(args.iter().map(|s| s.as_ref().to_string()));
    dimscope::cli::run(v)
}

pub fn p(path: &Path) -> String {
    path.display().to_string()
}

/// Every file under `dir`, keyed by relative path.
pub fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Compare two run directories, ignoring manifests (they hold timestamps
/// and the command line). Returns the first difference.
pub fn compare_runs(a: &Path, b: &Path) -> Result<usize, String> {
    let strip = |m: BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> {
        m.into_iter()
            .filter(|(k, _)| !k.to_string_lossy().ends_with(".manifest.json"))
            .collect()
    };
    let (fa, fb) = (strip(files_under(a)), strip(files_under(b)));
    if fa.keys().ne(fb.keys()) {
        return Err(format!("file sets differ: {:?} vs {:?}", fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>()));
    }
    for (k, v) in &fa {
        if fb[k] != *v {
            return Err(format!("{} differs", k.display()));
        }
    }
    Ok(fa.len())
}

/// Fixed-point arithmetic with `FRAC` fractional bits, used as an
/// independent high-precision reference for `−ln Σ exp(fᵢ)`.
pub mod fixed {
    use super::*;

    pub const FRAC: u32 = 256;

    fn one() -> BigInt {
        BigInt::one() << FRAC
    }

    /// Exact conversion of a finite f64 (bits below 2^-FRAC truncated).
    pub fn from_f64(x: f64) -> BigInt {
        if x == 0.0 {
            return BigInt::zero();
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
        let mut v = BigInt::from(mant);
        let shift = e + FRAC as i64;
        if shift >= 0 {
            v <<= shift as usize;
        } else {
            v >>= (-shift) as usize;
        }
        v * sign
    }

    pub fn to_f64(x: &BigInt) -> f64 {
        // keep 64 significant bits, then scale by an exact power of two
        let bits = x.abs().bits() as i64;
        let drop = (bits - 64).max(0);
        let top = (x >> drop as usize).to_f64().unwrap();
        top * 2f64.powi((drop - FRAC as i64) as i32)
    }

    fn mul(a: &BigInt, b: &BigInt) -> BigInt {
        (a * b) >> FRAC
    }

    fn div_int(a: &BigInt, k: u64) -> BigInt {
        a / BigInt::from(k)
    }

    /// ln 2 = Σ_{k≥1} 1/(k·2^k).
    pub fn ln2() -> BigInt {
        let mut sum = BigInt::zero();
        let mut pow = one();
        for k in 1..=(FRAC as u64 + 8) {
            pow >>= 1;
            sum += div_int(&pow, k);
        }
        sum
    }

    /// exp(r) for 0 ≤ r < 1 by Taylor series.
    fn exp_small(r: &BigInt) -> BigInt {
        let mut term = one();
        let mut sum = one();
        for k in 1..200u64 {
            term = div_int(&mul(&term, r), k);
            if term.is_zero() {
                break;
            }
            sum += &term;
        }
        sum
    }

    /// exp(y) for y ≤ 0.
    pub fn exp_nonpos(y: &BigInt, ln2: &BigInt) -> BigInt {
        assert!(!y.is_positive());
        // y = −q·ln2 + r with 0 ≤ r < ln2
        let neg = -y;
        let q: BigInt = &neg / ln2 + 1;
        let r = y + &q * ln2;
        let q = q.to_usize().unwrap();
        exp_small(&r) >> q
    }

    /// ln(s) for s ≥ 1 via s = 2^m·u, u ∈ [1, 2), ln u = 2·atanh((u−1)/(u+1)).
    pub fn ln_ge1(s: &BigInt, ln2: &BigInt) -> BigInt {
        let mut m = 0u64;
        let mut u = s.clone();
        let two = one() << 1;
        while u >= two {
            u >>= 1;
            m += 1;
        }
        let z = ((&u - one()) << FRAC) / (&u + one());
        let z2 = mul(&z, &z);
        let mut term = z.clone();
        let mut sum = BigInt::zero();
        let mut k = 1u64;
        while !term.is_zero() {
            sum += div_int(&term, k);
            term = mul(&term, &z2);
            k += 2;
        }
        (sum << 1) + ln2 * BigInt::from(m)
    }

    /// −ln Σ exp(fᵢ) to roughly FRAC bits.
    pub fn neg_logsumexp(f: &[f64], ln2: &BigInt) -> f64 {
        let xs: Vec<BigInt> = f.iter().map(|&v| from_f64(v)).collect();
        let m = xs.iter().max().unwrap().clone();
        let s: BigInt = xs.iter().map(|x| exp_nonpos(&(x - &m), ln2)).sum();
        to_f64(&-(m + ln_ge1(&s, ln2)))
    }
}
