//! Published IL listings and the comparison used by the golden tests.
//!
//! The listings print unary instructions without the empty middle slot
//! (`STR R_EBP:32, V_00:32`) while `format_il` always renders it, so both
//! sides are normalised by dropping the empty slot before comparison.

use resmt::il::format_il;
use resmt::lifter::lift;
use resmt::loader::{parse_hex, FunctionImage};
use resmt::x86::decode_one;

pub struct GoldenCase {
    pub asm: &'static str,
    pub hex: &'static str,
    pub listing: &'static str,
}

pub const CASES: &[GoldenCase] = &[
    GoldenCase {
        asm: "push ebp",
        hex: "55",
        listing: "STR R_EBP:32, V_00:32
        STR R_ESP:32, V_01:32
        SUB V_01:32, 4:32, V_02:32
        STR V_02:32, R_ESP:32
        STM V_00:32, V_02:32",
    },
    GoldenCase {
        asm: "mov ebp, esp",
        hex: "89 E5",
        listing: "STR R_ESP:32, V_00:32
        STR V_00:32, R_EBP:32",
    },
    GoldenCase {
        asm: "mov eax, [ebp+8]",
        hex: "8B 45 08",
        listing: "STR R_EBP:32, V_00:32
        ADD V_00:32, 8:32, V_01:32
        LDM V_01:32, V_02:32
        STR V_02:32, R_EAX:32",
    },
    GoldenCase {
        asm: "pop ebp",
        hex: "5D",
        listing: "STR R_ESP:32, V_00:32
        LDM V_00:32, V_01:32
        ADD V_00:32, 4:32, V_02:32
        STR V_02:32, R_ESP:32
        STR V_01:32, R_EBP:32",
    },
    GoldenCase {
        asm: "ret",
        hex: "C3",
        listing: "LDM R_ESP:32, , V_01:32
        ADD R_ESP:32, 4:32, R_ESP:32
        JCC 1:1, , V_01:32",
    },
    GoldenCase {
        asm: "mov eax, ecx",
        hex: "89 C8",
        listing: "STR R_ECX:32, R_EAX:32",
    },
    GoldenCase {
        asm: "sub eax, 3",
        hex: "83 E8 03",
        listing: "STR R_EAX:32, V_00:32
        SUB V_00:32, 3:32, V_01:32
        SUB V_00:32, 3:32, V_02:32
        LT V_00:32, 3:32, R_CF:1
        AND V_02:32, FF:32, V_04:32
        OR V_04:32, 0:32, V_03:8
        SHR V_03:8, 7:8, V_05:8
        SHR V_03:8, 6:8, V_06:8
        XOR V_05:8, V_06:8, V_07:8
        SHR V_03:8, 5:8, V_08:8
        SHR V_03:8, 4:8, V_09:8
        XOR V_08:8, V_09:8, V_10:8
        XOR V_07:8, V_10:8, V_11:8
        SHR V_03:8, 3:8, V_12:8
        SHR V_03:8, 2:8, V_13:8
        XOR V_12:8, V_13:8, V_14:8
        SHR V_03:8, 1:8, V_15:8
        XOR V_15:8, V_03:8, V_16:8
        XOR V_14:8, V_16:8, V_17:8
        XOR V_11:8, V_17:8, V_18:8
        AND V_18:8, 1:8, V_20:8
        OR V_20:8, 0:8, V_19:1
        NOT V_19:1, R_PF:1
        XOR V_00:32, 3:32, V_21:32
        XOR V_02:32, V_21:32, V_22:32
        AND 10:32, V_22:32, V_23:32
        EQ 1:32, V_23:32, R_AF:1
        EQ V_02:32, 0:32, R_ZF:1
        SHR V_02:32, 1F:32, V_24:32
        AND 1:32, V_24:32, V_25:32
        EQ 1:32, V_25:32, R_SF:1
        XOR V_00:32, 3:32, V_26:32
        XOR V_00:32, V_02:32, V_27:32
        AND V_26:32, V_27:32, V_28:32
        SHR V_28:32, 1F:32, V_29:32
        EQ 1:32, V_30:32, R_OF:1
        STR V_01:32, R_EAX:32",
    },
];

fn normalise(line: &str) -> String {
    let collapsed = line.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.replace(", , ", ", ").trim_end().to_string()
}

pub fn listing(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(normalise)
        .collect()
}

pub fn lifted(hex: &str) -> Vec<String> {
    let img = FunctionImage::new(parse_hex(hex).unwrap(), 0).unwrap();
    let block = lift(&decode_one(&img, 0).unwrap()).unwrap();
    format_il(&block.il).lines().map(normalise).collect()
}

/// Line-for-line comparison. In the SUB listing the AF line compares
/// against 1 instead of testing bit 4 and the OF line reads an undefined
/// temporary; those two lines only need to write the same flag, and the
/// corrected forms must be present.
pub fn compare(case: &GoldenCase) -> Result<(), String> {
    let ours = lifted(case.hex);
    let published = listing(case.listing);
    if ours.len() != published.len() {
        return Err(format!(
            "{}: {} lines, published {}",
            case.asm,
            ours.len(),
            published.len()
        ));
    }
    let exempt = case.asm.starts_with("sub");
    for (n, (got, want)) in ours.iter().zip(&published).enumerate() {
        if exempt && (want.ends_with("R_AF:1") || want.ends_with("R_OF:1")) {
            if !got.ends_with(&want[want.len() - 6..]) {
                return Err(format!("{} line {n}: {got}", case.asm));
            }
            continue;
        }
        if got != want {
            return Err(format!("{} line {n}: got `{got}`, published `{want}`", case.asm));
        }
    }
    if exempt {
        for fixed in ["EQ 10:32, V_23:32, R_AF:1", "EQ 1:32, V_29:32, R_OF:1"] {
            if !ours.iter().any(|l| l == fixed) {
                return Err(format!("{}: missing `{fixed}`", case.asm));
            }
        }
    }
    Ok(())
}
