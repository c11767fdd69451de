//! Byte-quantity helpers: alignment arithmetic and human-readable parsing.

use thiserror::Error;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;
pub const GIB: u64 = 1024 * MIB;

/// Rounds `value` up to the next multiple of `quantum`.
///
/// `quantum` must be nonzero.
pub fn round_up(value: u64, quantum: u64) -> u64 {
    debug_assert!(quantum > 0);
    value.next_multiple_of(quantum)
}

pub fn is_aligned(value: u64, quantum: u64) -> bool {
    quantum > 0 && value % quantum == 0
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid byte quantity {input:?}: {reason}")]
pub struct ParseBytesError {
    pub input: String,
    pub reason: &'static str,
}

/// Parses a byte quantity with an optional binary suffix: `"4096"`, `"512KiB"`,
/// `"2MiB"`, `"80GiB"`. Suffixes are case-insensitive; values are exact
/// integers.
pub fn parse_bytes(input: &str) -> Result<u64, ParseBytesError> {
    let err = |reason| ParseBytesError {
        input: input.to_string(),
        reason,
    };
    let s = input.trim();
    if s.is_empty() {
        return Err(err("empty string"));
    }
    let lower = s.to_ascii_lowercase();
    let (digits, multiplier) = if let Some(rest) = lower.strip_suffix("kib") {
        (rest, KIB)
    } else if let Some(rest) = lower.strip_suffix("mib") {
        (rest, MIB)
    } else if let Some(rest) = lower.strip_suffix("gib") {
        (rest, GIB)
    } else if let Some(rest) = lower.strip_suffix('b') {
        (rest, 1)
    } else {
        (lower.as_str(), 1)
    };
    let digits = digits.trim();
    if digits.is_empty() {
        return Err(err("missing number"));
    }
    let value: u64 = digits
        .parse()
        .map_err(|_| err("expected a non-negative integer"))?;
    value
        .checked_mul(multiplier)
        .ok_or_else(|| err("quantity overflows u64"))
}

/// Formats a byte count with the largest exact binary suffix.
pub fn format_bytes(bytes: u64) -> String {
    if bytes >= GIB && bytes % GIB == 0 {
        format!("{} GiB", bytes / GIB)
    } else if bytes >= MIB && bytes % MIB == 0 {
        format!("{} MiB", bytes / MIB)
    } else if bytes >= KIB && bytes % KIB == 0 {
        format!("{} KiB", bytes / KIB)
    } else {
        format!("{bytes} B")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_up_basics() {
        assert_eq!(round_up(0, 512), 0);
        assert_eq!(round_up(1, 512), 512);
        assert_eq!(round_up(512, 512), 512);
        assert_eq!(round_up(3 * MIB, 2 * MIB), 4 * MIB);
    }

    #[test]
    fn parse_suffixes() {
        assert_eq!(parse_bytes("4096").unwrap(), 4096);
        assert_eq!(parse_bytes("512KiB").unwrap(), 512 * KIB);
        assert_eq!(parse_bytes("2MiB").unwrap(), 2 * MIB);
        assert_eq!(parse_bytes("80GiB").unwrap(), 80 * GIB);
        assert_eq!(parse_bytes("128mib").unwrap(), 128 * MIB);
        assert_eq!(parse_bytes("64B").unwrap(), 64);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(parse_bytes("").is_err());
        assert!(parse_bytes("MiB").is_err());
        assert!(parse_bytes("1.5GiB").is_err());
        assert!(parse_bytes("-1").is_err());
        assert!(parse_bytes("99999999999999999999GiB").is_err());
    }

    #[test]
    fn format_exact_suffixes() {
        assert_eq!(format_bytes(2 * MIB), "2 MiB");
        assert_eq!(format_bytes(80 * GIB), "80 GiB");
        assert_eq!(format_bytes(3 * MIB / 2), "1536 KiB");
        assert_eq!(format_bytes(100), "100 B");
    }
}
