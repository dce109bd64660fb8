//! XYZ text format: atom count, comment line, then `SYMBOL x y z` rows in Å.

use std::fmt::Write as _;

use crate::chem::{AtomTable, Molecule};
use crate::error::{Error, Result};

/// Format with nine significant digits in positional notation.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0.00000000".to_string() } else { format!("{x}") };
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (8 - mag).clamp(0, 30) as usize;
    format!("{:.*}", decimals, x)
}

/// Serialize the real atoms of `mol`; padding rows are skipped.
pub fn write_xyz(mol: &Molecule, table: &AtomTable, comment: &str) -> String {
    let mut s = String::new();
    let n = mol.n_atoms();
    let _ = writeln!(s, "{n}");
    let _ = writeln!(s, "{}", comment.replace('\n', " "));
    for i in 0..mol.capacity() {
        if let Some(e) = mol.element(i) {
            let c = mol.coords()[i];
            let _ = writeln!(
                s,
                "{} {} {} {}",
                table.symbol(e),
                format_sig9(c[0]),
                format_sig9(c[1]),
                format_sig9(c[2])
            );
        }
    }
    s
}

/// Parse one XYZ frame. Returns the molecule and the comment line.
pub fn parse_xyz(text: &str, table: &AtomTable) -> Result<(Molecule, String)> {
    let mut lines = text.lines();
    let err = |line: usize, msg: &str| Error::Xyz { line, msg: msg.to_string() };
    let n: usize = lines
        .next()
        .ok_or_else(|| err(1, "missing atom count"))?
        .trim()
        .parse()
        .map_err(|_| err(1, "atom count is not an integer"))?;
    let comment = lines.next().ok_or_else(|| err(2, "missing comment line"))?.to_string();
    let mut coords = Vec::with_capacity(n);
    let mut elements = Vec::with_capacity(n);
    for k in 0..n {
        let line_no = k + 3;
        let line = lines.next().ok_or_else(|| err(line_no, "too few atom lines"))?;
        let mut fields = line.split_whitespace();
        let sym = fields.next().ok_or_else(|| err(line_no, "empty atom line"))?;
        let e = table
            .index_of(sym)
            .ok_or_else(|| err(line_no, &format!("unknown element symbol {sym:?}")))?;
        let mut xyz = [0.0; 3];
        for v in xyz.iter_mut() {
            *v = fields
                .next()
                .ok_or_else(|| err(line_no, "missing coordinate"))?
                .parse()
                .map_err(|_| err(line_no, "coordinate is not a number"))?;
        }
        if fields.next().is_some() {
            return Err(err(line_no, "unexpected trailing field"));
        }
        coords.push(xyz);
        elements.push(e);
    }
    let mol = Molecule::from_elements(coords, &elements, table.n_elements())?;
    Ok((mol, comment))
}
