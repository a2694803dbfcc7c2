//! C99 text for loop nests, literals and identifiers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::tir::{BinOp, Expr, Index, Intrinsic, Stmt, TirFunc};

const C_KEYWORDS: &[&str] = &[
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else", "enum", "extern",
    "float", "for", "goto", "if", "inline", "int", "long", "register", "restrict", "return", "short", "signed",
    "sizeof", "static", "struct", "switch", "typedef", "union", "unsigned", "void", "volatile", "while", "_Bool",
    "_Complex", "_Imaginary",
];

/// Maps an arbitrary value name onto a C identifier.
pub fn sanitize(name: &str) -> String {
    let mut out: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    if out.is_empty() || out.starts_with(|c: char| c.is_ascii_digit()) || out.starts_with('_') {
        out.insert_str(0, "v_");
    }
    if C_KEYWORDS.contains(&out.as_str()) {
        out.insert_str(0, "v_");
    }
    out
}

/// Hands out unique C identifiers for names within one scope.
#[derive(Debug, Default, Clone)]
pub struct NameTable {
    used: BTreeSet<String>,
    assigned: BTreeMap<String, String>,
}

impl NameTable {
    pub fn with_reserved(reserved: &[&str]) -> Self {
        NameTable {
            used: reserved.iter().map(|s| s.to_string()).collect(),
            assigned: BTreeMap::new(),
        }
    }

    /// Unique identifier for `key`, derived from `base` (already a valid C
    /// identifier). Repeated keys get the same answer.
    pub fn name(&mut self, key: &str, base: &str) -> String {
        if let Some(n) = self.assigned.get(key) {
            return n.clone();
        }
        let mut candidate = base.to_owned();
        let mut i = 1;
        while self.used.contains(&candidate) {
            candidate = format!("{base}_{i}");
            i += 1;
        }
        self.used.insert(candidate.clone());
        self.assigned.insert(key.to_owned(), candidate.clone());
        candidate
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.assigned.get(key).map(String::as_str)
    }
}

/// Shortest round-trip literal (at most 9 significant digits) with an `f` suffix.
pub fn float_literal(v: f32) -> String {
    if v.is_nan() {
        return "NAN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "INFINITY".into() } else { "(-INFINITY)".into() };
    }
    let mut s = format!("{v:?}");
    if !s.contains(['.', 'e']) {
        s.push_str(".0");
    }
    s.push('f');
    s
}

fn index_text(index: &Index) -> String {
    let mut parts: Vec<String> = index
        .terms
        .iter()
        .map(|(v, c)| if *c == 1 { v.clone() } else { format!("{v} * {c}") })
        .collect();
    if index.offset != 0 || parts.is_empty() {
        parts.push(index.offset.to_string());
    }
    parts.join(" + ")
}

fn expr_text(e: &Expr, names: &BTreeMap<&str, String>) -> String {
    match e {
        Expr::Lit(v) => float_literal(*v),
        Expr::Var(v) => format!("(float){v}"),
        Expr::Load { buffer, index } => format!("{}[{}]", names[buffer.as_str()], index_text(index)),
        Expr::Binary { op, lhs, rhs } => {
            let (l, r) = (expr_text(lhs, names), expr_text(rhs, names));
            match op {
                BinOp::Add => format!("({l} + {r})"),
                BinOp::Sub => format!("({l} - {r})"),
                BinOp::Mul => format!("({l} * {r})"),
                BinOp::Div => format!("({l} / {r})"),
                BinOp::Max => format!("fmaxf({l}, {r})"),
            }
        }
        Expr::Call { func, arg } => {
            let a = expr_text(arg, names);
            match func {
                Intrinsic::Exp => format!("expf({a})"),
                Intrinsic::Tanh => format!("tanhf({a})"),
            }
        }
    }
}

fn stmt_text(out: &mut String, s: &Stmt, depth: usize, names: &BTreeMap<&str, String>) {
    let pad = "    ".repeat(depth);
    match s {
        Stmt::For { var, extent, body } => {
            let _ = writeln!(out, "{pad}for (int32_t {var} = 0; {var} < {extent}; ++{var}) {{");
            for b in body {
                stmt_text(out, b, depth + 1, names);
            }
            let _ = writeln!(out, "{pad}}}");
        }
        Stmt::Assign { buffer, index, value } => {
            let _ = writeln!(
                out,
                "{pad}{}[{}] = {};",
                names[buffer.as_str()],
                index_text(index),
                expr_text(value, names)
            );
        }
    }
}

/// Default C name for a lowered function.
pub fn func_name(f: &TirFunc) -> String {
    format!("op_{}", sanitize(&f.name))
}

pub fn emit_c_func(f: &TirFunc) -> String {
    emit_c_func_named(f, &func_name(f))
}

/// A `static void` function: read-only buffers as `const float*`, written
/// ones as `float*`, scratch as fixed-size local arrays.
pub fn emit_c_func_named(f: &TirFunc, c_name: &str) -> String {
    let mut table = NameTable::with_reserved(&[c_name]);
    let mut names: BTreeMap<&str, String> = BTreeMap::new();
    for b in f.params.iter().chain(&f.locals) {
        names.insert(b.name.as_str(), table.name(&b.name, &sanitize(&b.name)));
    }
    let written = f.written();
    let params: Vec<String> = f
        .params
        .iter()
        .map(|b| {
            let qual = if written.contains(b.name.as_str()) { "float*" } else { "const float*" };
            format!("{qual} {}", names[b.name.as_str()])
        })
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "static void {c_name}({}) {{", params.join(", "));
    for l in &f.locals {
        let _ = writeln!(out, "    float {}[{}];", names[l.name.as_str()], l.len().max(1));
    }
    for s in &f.body {
        stmt_text(&mut out, s, 1, &names);
    }
    out.push_str("}\n");
    out
}
