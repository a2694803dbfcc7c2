//! Loop-nest tensor IR and per-op lowering.
//!
//! A [`TirFunc`] is a list of statements over flat f32 buffers. Index
//! expressions are affine in the enclosing loop variables, so every access
//! can be bounds-checked statically from the loop extents.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::accel::{self, AccelRegistry, PartitionReport};
use crate::exec::{self, Exec};
use crate::hir::{HirModule, HirOp, KindTag, OpKind, Target, ValueId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BufferRole {
    GraphInput,
    GraphOutput,
    Param,
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Buffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: BufferRole,
}

impl Buffer {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, role: BufferRole) -> Self {
        Buffer {
            name: name.into(),
            shape,
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `offset + sum(coeff * var)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Index {
    pub terms: Vec<(String, i64)>,
    pub offset: i64,
}

impl Index {
    pub fn constant(offset: i64) -> Self {
        Index { terms: Vec::new(), offset }
    }

    pub fn var(name: &str) -> Self {
        Index {
            terms: vec![(name.to_owned(), 1)],
            offset: 0,
        }
    }

    pub fn term(mut self, var: &str, coeff: i64) -> Self {
        if coeff != 0 {
            self.terms.push((var.to_owned(), coeff));
        }
        self
    }

    pub fn plus(mut self, offset: i64) -> Self {
        self.offset += offset;
        self
    }

    fn eval(&self, vars: &HashMap<&str, i64>) -> i64 {
        self.offset + self.terms.iter().map(|(v, c)| c * vars[v.as_str()]).sum::<i64>()
    }
}

impl fmt::Display for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self
            .terms
            .iter()
            .map(|(v, c)| if *c == 1 { v.clone() } else { format!("{v} * {c}") })
            .collect();
        if self.offset != 0 || parts.is_empty() {
            parts.push(self.offset.to_string());
        }
        f.write_str(&parts.join(" + "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intrinsic {
    Exp,
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(f32),
    /// Loop variable converted to f32.
    Var(String),
    Load { buffer: String, index: Index },
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Call { func: Intrinsic, arg: Box<Expr> },
}

impl Expr {
    pub fn load(buffer: &str, index: Index) -> Self {
        Expr::Load {
            buffer: buffer.to_owned(),
            index,
        }
    }

    pub fn bin(op: BinOp, lhs: Expr, rhs: Expr) -> Self {
        Expr::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn call(func: Intrinsic, arg: Expr) -> Self {
        Expr::Call { func, arg: Box::new(arg) }
    }

    fn add(self, rhs: Expr) -> Self {
        Expr::bin(BinOp::Add, self, rhs)
    }

    fn sub(self, rhs: Expr) -> Self {
        Expr::bin(BinOp::Sub, self, rhs)
    }

    fn mul(self, rhs: Expr) -> Self {
        Expr::bin(BinOp::Mul, self, rhs)
    }

    fn div(self, rhs: Expr) -> Self {
        Expr::bin(BinOp::Div, self, rhs)
    }

    /// `1 / (1 + exp(0 - x))`
    fn sigmoid(x: Expr) -> Self {
        Expr::Lit(1.0).div(Expr::Lit(1.0).add(Expr::call(Intrinsic::Exp, Expr::Lit(0.0).sub(x))))
    }

    fn visit_loads<'a>(&'a self, f: &mut impl FnMut(&'a str, &'a Index)) {
        match self {
            Expr::Lit(_) | Expr::Var(_) => {}
            Expr::Load { buffer, index } => f(buffer, index),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.visit_loads(f);
                rhs.visit_loads(f);
            }
            Expr::Call { arg, .. } => arg.visit_loads(f),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(v) => write!(f, "{v:?}"),
            Expr::Var(v) => f.write_str(v),
            Expr::Load { buffer, index } => write!(f, "{buffer}[{index}]"),
            Expr::Binary { op, lhs, rhs } => match op {
                BinOp::Max => write!(f, "max({lhs}, {rhs})"),
                BinOp::Add => write!(f, "({lhs} + {rhs})"),
                BinOp::Sub => write!(f, "({lhs} - {rhs})"),
                BinOp::Mul => write!(f, "({lhs} * {rhs})"),
                BinOp::Div => write!(f, "({lhs} / {rhs})"),
            },
            Expr::Call { func, arg } => match func {
                Intrinsic::Exp => write!(f, "exp({arg})"),
                Intrinsic::Tanh => write!(f, "tanh({arg})"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    For { var: String, extent: usize, body: Vec<Stmt> },
    Assign { buffer: String, index: Index, value: Expr },
}

impl Stmt {
    fn assign(buffer: &str, index: Index, value: Expr) -> Self {
        Stmt::Assign {
            buffer: buffer.to_owned(),
            index,
            value,
        }
    }

    fn for_loop(var: &str, extent: usize, body: Vec<Stmt>) -> Self {
        Stmt::For {
            var: var.to_owned(),
            extent,
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TirFunc {
    pub name: String,
    /// Buffers passed in by the caller, in call order.
    pub params: Vec<Buffer>,
    /// Function-local scratch buffers.
    pub locals: Vec<Buffer>,
    pub body: Vec<Stmt>,
    pub source_op: ValueId,
}

impl TirFunc {
    pub fn buffer(&self, name: &str) -> Option<&Buffer> {
        self.params.iter().chain(&self.locals).find(|b| b.name == name)
    }

    /// Names of buffers stored to anywhere in the body.
    pub fn written(&self) -> BTreeSet<&str> {
        fn walk<'a>(stmts: &'a [Stmt], out: &mut BTreeSet<&'a str>) {
            for s in stmts {
                match s {
                    Stmt::For { body, .. } => walk(body, out),
                    Stmt::Assign { buffer, .. } => {
                        out.insert(buffer);
                    }
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.body, &mut out);
        out
    }

    /// Extents of the loops, outermost first, following the first loop at each depth.
    pub fn loop_extents(&self) -> Vec<Vec<usize>> {
        fn walk(stmts: &[Stmt], depth: usize, out: &mut Vec<Vec<usize>>) {
            for s in stmts {
                if let Stmt::For { extent, body, .. } = s {
                    if out.len() <= depth {
                        out.resize(depth + 1, Vec::new());
                    }
                    out[depth].push(*extent);
                    walk(body, depth + 1, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.body, 0, &mut out);
        out
    }
}

impl fmt::Display for TirFunc {
    /// One statement per line, indented by loop depth.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sig: Vec<String> = self
            .params
            .iter()
            .map(|b| format!("{}[{}]", b.name, b.len()))
            .collect();
        writeln!(f, "func {}({}):", self.name, sig.join(", "))?;
        for l in &self.locals {
            writeln!(f, "  local {}[{}]", l.name, l.len())?;
        }
        fn walk(f: &mut fmt::Formatter<'_>, stmts: &[Stmt], depth: usize) -> fmt::Result {
            for s in stmts {
                let pad = "  ".repeat(depth);
                match s {
                    Stmt::For { var, extent, body } => {
                        writeln!(f, "{pad}for {var} in 0..{extent}:")?;
                        walk(f, body, depth + 1)?;
                    }
                    Stmt::Assign { buffer, index, value } => {
                        writeln!(f, "{pad}{buffer}[{index}] = {value}")?;
                    }
                }
            }
            Ok(())
        }
        walk(f, &self.body, 1)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TirError {
    #[error("cannot lower op `{op}` ({kind}) to a CPU function: {reason}")]
    Unsupported {
        op: String,
        kind: &'static str,
        reason: String,
    },
    #[error("op `{0}` has no inferred shape")]
    MissingShape(String),
    #[error("tir pass `{pass}` rejected `{func}`: {message}")]
    PassRejected {
        pass: String,
        func: String,
        message: String,
    },
    #[error("`{func}`: access {buffer}[{min}..={max}] outside 0..{len}")]
    OutOfBounds {
        func: String,
        buffer: String,
        min: i64,
        max: i64,
        len: usize,
    },
    #[error("`{func}`: unknown buffer or variable `{name}`")]
    Unknown { func: String, name: String },
    #[error("no buffer bound for `{0}`")]
    Unbound(String),
}

pub type TirPassFn = Arc<dyn Fn(TirFunc) -> Result<TirFunc, String> + Send + Sync>;

/// A named TirFunc -> TirFunc transform registered by an accelerator.
#[derive(Clone)]
pub struct TirPass {
    pub name: String,
    pub apply: TirPassFn,
}

impl TirPass {
    pub fn new<F>(name: &str, apply: F) -> Self
    where
        F: Fn(TirFunc) -> Result<TirFunc, String> + Send + Sync + 'static,
    {
        TirPass {
            name: name.to_owned(),
            apply: Arc::new(apply),
        }
    }

    pub fn identity() -> Self {
        TirPass::new("identity", Ok)
    }

    pub fn fold_constants() -> Self {
        TirPass::new("fold_constants", |f| Ok(fold_constants(f)))
    }
}

impl fmt::Debug for TirPass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TirPass({})", self.name)
    }
}

pub fn run_tir_passes(f: TirFunc, passes: &[TirPass]) -> Result<TirFunc, TirError> {
    passes.iter().try_fold(f, |func, pass| {
        let name = func.name.clone();
        (pass.apply)(func).map_err(|message| TirError::PassRejected {
            pass: pass.name.clone(),
            func: name,
            message,
        })
    })
}

fn fold_expr(e: Expr) -> Expr {
    match e {
        Expr::Binary { op, lhs, rhs } => {
            let (l, r) = (fold_expr(*lhs), fold_expr(*rhs));
            match (&l, &r) {
                (Expr::Lit(a), Expr::Lit(b)) => Expr::Lit(apply_bin(op, *a, *b)),
                _ => Expr::bin(op, l, r),
            }
        }
        Expr::Call { func, arg } => match fold_expr(*arg) {
            Expr::Lit(v) => Expr::Lit(apply_intrinsic(func, v)),
            a => Expr::call(func, a),
        },
        other => other,
    }
}

/// Folds literal-only subexpressions.
pub fn fold_constants(mut f: TirFunc) -> TirFunc {
    fn walk(stmts: Vec<Stmt>) -> Vec<Stmt> {
        stmts
            .into_iter()
            .map(|s| match s {
                Stmt::For { var, extent, body } => Stmt::For {
                    var,
                    extent,
                    body: walk(body),
                },
                Stmt::Assign { buffer, index, value } => Stmt::Assign {
                    buffer,
                    index,
                    value: fold_expr(value),
                },
            })
            .collect()
    }
    f.body = walk(std::mem::take(&mut f.body));
    f
}

pub fn apply_bin(op: BinOp, a: f32, b: f32) -> f32 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        BinOp::Max => a.max(b),
    }
}

pub fn apply_intrinsic(func: Intrinsic, v: f32) -> f32 {
    match func {
        Intrinsic::Exp => v.exp(),
        Intrinsic::Tanh => v.tanh(),
    }
}

/// Checks every load and store against its buffer extent.
pub fn check_bounds(f: &TirFunc) -> Result<(), TirError> {
    let lens: HashMap<&str, usize> = f
        .params
        .iter()
        .chain(&f.locals)
        .map(|b| (b.name.as_str(), b.len()))
        .collect();
    fn range(f: &TirFunc, index: &Index, extents: &HashMap<&str, usize>) -> Result<(i64, i64), TirError> {
        let (mut lo, mut hi) = (index.offset, index.offset);
        for (v, c) in &index.terms {
            let ext = *extents.get(v.as_str()).ok_or_else(|| TirError::Unknown {
                func: f.name.clone(),
                name: v.clone(),
            })? as i64;
            let span = c * (ext - 1);
            lo += span.min(0);
            hi += span.max(0);
        }
        Ok((lo, hi))
    }
    fn check(
        f: &TirFunc,
        lens: &HashMap<&str, usize>,
        buffer: &str,
        index: &Index,
        extents: &HashMap<&str, usize>,
    ) -> Result<(), TirError> {
        let len = *lens.get(buffer).ok_or_else(|| TirError::Unknown {
            func: f.name.clone(),
            name: buffer.to_owned(),
        })?;
        let (min, max) = range(f, index, extents)?;
        if min < 0 || max >= len as i64 {
            return Err(TirError::OutOfBounds {
                func: f.name.clone(),
                buffer: buffer.to_owned(),
                min,
                max,
                len,
            });
        }
        Ok(())
    }
    fn walk<'a>(
        f: &'a TirFunc,
        lens: &HashMap<&str, usize>,
        stmts: &'a [Stmt],
        extents: &mut HashMap<&'a str, usize>,
    ) -> Result<(), TirError> {
        for s in stmts {
            match s {
                Stmt::For { var, extent, body } => {
                    if *extent == 0 {
                        continue;
                    }
                    extents.insert(var, *extent);
                    walk(f, lens, body, extents)?;
                    extents.remove(var.as_str());
                }
                Stmt::Assign { buffer, index, value } => {
                    check(f, lens, buffer, index, extents)?;
                    let mut result = Ok(());
                    value.visit_loads(&mut |b, i| {
                        if result.is_ok() {
                            result = check(f, lens, b, i, extents);
                        }
                    });
                    result?;
                }
            }
        }
        Ok(())
    }
    walk(f, &lens, &f.body, &mut HashMap::new())
}

/// Runs a function against named buffers. Locals are allocated per call.
pub fn eval_func(f: &TirFunc, buffers: &mut HashMap<String, Vec<f32>>) -> Result<(), TirError> {
    for p in &f.params {
        if !buffers.contains_key(&p.name) {
            return Err(TirError::Unbound(p.name.clone()));
        }
    }
    let mut locals: Vec<(String, Vec<f32>)> = Vec::new();
    for l in &f.locals {
        let prev = buffers.insert(l.name.clone(), vec![0.0; l.len()]);
        locals.push((l.name.clone(), prev.unwrap_or_default()));
    }
    fn eval_expr(e: &Expr, buffers: &HashMap<String, Vec<f32>>, vars: &HashMap<&str, i64>) -> f32 {
        match e {
            Expr::Lit(v) => *v,
            Expr::Var(v) => vars[v.as_str()] as f32,
            Expr::Load { buffer, index } => buffers[buffer][index.eval(vars) as usize],
            Expr::Binary { op, lhs, rhs } => {
                apply_bin(*op, eval_expr(lhs, buffers, vars), eval_expr(rhs, buffers, vars))
            }
            Expr::Call { func, arg } => apply_intrinsic(*func, eval_expr(arg, buffers, vars)),
        }
    }
    fn run<'a>(stmts: &'a [Stmt], buffers: &mut HashMap<String, Vec<f32>>, vars: &mut HashMap<&'a str, i64>) {
        for s in stmts {
            match s {
                Stmt::For { var, extent, body } => {
                    for i in 0..*extent as i64 {
                        vars.insert(var, i);
                        run(body, buffers, vars);
                    }
                    vars.remove(var.as_str());
                }
                Stmt::Assign { buffer, index, value } => {
                    let v = eval_expr(value, buffers, vars);
                    let at = index.eval(vars) as usize;
                    buffers.get_mut(buffer).expect("bounds-checked buffer")[at] = v;
                }
            }
        }
    }
    check_bounds(f)?;
    run(&f.body, buffers, &mut HashMap::new());
    for (name, prev) in locals {
        if prev.is_empty() {
            buffers.remove(&name);
        } else {
            buffers.insert(name, prev);
        }
    }
    Ok(())
}

struct Vars(usize);

impl Vars {
    fn next(&mut self) -> String {
        self.0 += 1;
        format!("i{}", self.0 - 1)
    }
}

fn role_of(m: &HirModule, value: &str) -> BufferRole {
    if m.outputs.iter().any(|o| o == value) {
        return BufferRole::GraphOutput;
    }
    match m.op(value).map(|o| o.kind.tag()) {
        Some(KindTag::Input) => BufferRole::GraphInput,
        Some(KindTag::Const) => BufferRole::Param,
        _ => BufferRole::Scratch,
    }
}

/// Lowers one CPU-targeted op to a loop nest.
pub fn lower_op(m: &HirModule, op: &HirOp) -> Result<TirFunc, TirError> {
    if let Target::Accel(name) = &op.target {
        return Err(TirError::Unsupported {
            op: op.id.clone(),
            kind: op.kind.tag().snake_name(),
            reason: format!("op is assigned to accelerator `{name}`"),
        });
    }
    lower_any(m, op)
}

/// Lowers an op regardless of its target; accelerator regions use this for
/// their reference functions.
pub(crate) fn lower_any(m: &HirModule, op: &HirOp) -> Result<TirFunc, TirError> {
    let tag = op.kind.tag();
    if tag.is_source() {
        return Err(TirError::Unsupported {
            op: op.id.clone(),
            kind: tag.snake_name(),
            reason: "source ops have no computation".into(),
        });
    }
    let shape_of = |v: &str| -> Result<Vec<usize>, TirError> {
        m.shape_of(v)
            .map(<[usize]>::to_vec)
            .ok_or_else(|| TirError::MissingShape(v.to_owned()))
    };
    let out_shape = shape_of(&op.id)?;
    let mut params: Vec<Buffer> = Vec::new();
    for v in &op.inputs {
        if params.iter().all(|b| &b.name != v) {
            params.push(Buffer::new(v.clone(), shape_of(v)?, role_of(m, v)));
        }
    }
    params.push(Buffer::new(op.id.clone(), out_shape.clone(), role_of(m, &op.id)));

    let inp = |i: usize| op.inputs[i].as_str();
    let out = op.id.as_str();
    let mut vars = Vars(0);
    let mut locals = Vec::new();
    let n_out: usize = out_shape.iter().product();

    let body = match &op.kind {
        OpKind::Input { .. } | OpKind::Const { .. } => unreachable!(),
        OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh | OpKind::Reshape { .. } => {
            let i = vars.next();
            let x = Expr::load(inp(0), Index::var(&i));
            let value = match &op.kind {
                OpKind::Relu => Expr::bin(BinOp::Max, x, Expr::Lit(0.0)),
                OpKind::Sigmoid => Expr::sigmoid(x),
                OpKind::Tanh => Expr::call(Intrinsic::Tanh, x),
                _ => x,
            };
            vec![Stmt::for_loop(&i, n_out, vec![Stmt::assign(out, Index::var(&i), value)])]
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let i = vars.next();
            let bop = match op.kind {
                OpKind::Add => BinOp::Add,
                OpKind::Sub => BinOp::Sub,
                _ => BinOp::Mul,
            };
            let value = Expr::bin(
                bop,
                Expr::load(inp(0), Index::var(&i)),
                Expr::load(inp(1), Index::var(&i)),
            );
            vec![Stmt::for_loop(&i, n_out, vec![Stmt::assign(out, Index::var(&i), value)])]
        }
        OpKind::Dense { units } => {
            let cols = *shape_of(inp(0))?.last().unwrap();
            let rows = n_out / units;
            let (u, j) = (vars.next(), vars.next());
            let row = if rows > 1 { Some(vars.next()) } else { None };
            let (xrow, orow) = match &row {
                Some(r) => (Index::default().term(r, cols as i64), Index::default().term(r, *units as i64)),
                None => (Index::default(), Index::default()),
            };
            let out_at = orow.term(&u, 1);
            let inner = vec![
                Stmt::assign(out, out_at.clone(), Expr::load(inp(2), Index::var(&u))),
                Stmt::for_loop(
                    &j,
                    cols,
                    vec![Stmt::assign(
                        out,
                        out_at.clone(),
                        Expr::load(out, out_at.clone()).add(
                            Expr::load(inp(1), Index::default().term(&u, cols as i64).term(&j, 1))
                                .mul(Expr::load(inp(0), xrow.term(&j, 1))),
                        ),
                    )],
                ),
            ];
            let nest = Stmt::for_loop(&u, *units, inner);
            match row {
                Some(r) => vec![Stmt::for_loop(&r, rows, vec![nest])],
                None => vec![nest],
            }
        }
        OpKind::Conv1dDwShared { kernel_len, stride } => {
            let xs = shape_of(inp(0))?;
            let (channels, len, out_len) = (xs[0] * xs[1], xs[2], out_shape[2]);
            let (c, t, k) = (vars.next(), vars.next(), vars.next());
            let out_at = Index::default().term(&c, out_len as i64).term(&t, 1);
            vec![Stmt::for_loop(
                &c,
                channels,
                vec![Stmt::for_loop(
                    &t,
                    out_len,
                    vec![
                        Stmt::assign(out, out_at.clone(), Expr::load(inp(2), Index::constant(0))),
                        Stmt::for_loop(
                            &k,
                            *kernel_len,
                            vec![Stmt::assign(
                                out,
                                out_at.clone(),
                                Expr::load(out, out_at.clone()).add(
                                    Expr::load(inp(1), Index::var(&k)).mul(Expr::load(
                                        inp(0),
                                        Index::default()
                                            .term(&c, len as i64)
                                            .term(&t, *stride as i64)
                                            .term(&k, 1),
                                    )),
                                ),
                            )],
                        ),
                    ],
                )],
            )]
        }
        OpKind::Gru { hidden } => {
            let h = *hidden;
            let xs = shape_of(inp(0))?;
            let (c, steps) = (xs[1], xs[2]);
            let (x, wx, wh, bx, bh) = (inp(0), inp(1), inp(2), inp(3), inp(4));
            locals = vec![
                Buffer::new("gx", vec![3 * h], BufferRole::Scratch),
                Buffer::new("gh", vec![3 * h], BufferRole::Scratch),
                Buffer::new("h_prev", vec![h], BufferRole::Scratch),
                Buffer::new("h_next", vec![h], BufferRole::Scratch),
            ];
            let i0 = vars.next();
            let t = vars.next();
            let (g, ch, g2, j, i, i2) = (vars.next(), vars.next(), vars.next(), vars.next(), vars.next(), vars.next());
            let gi = Index::var(&g);
            let g2i = Index::var(&g2);
            let at = |buf: &str, off: usize| Expr::load(buf, Index::var(&i).plus(off as i64));
            let r = Expr::sigmoid(at("gx", 0).add(at("gh", 0)));
            let z = || Expr::sigmoid(at("gx", h).add(at("gh", h)));
            let n = Expr::call(Intrinsic::Tanh, at("gx", 2 * h).add(r.mul(at("gh", 2 * h))));
            let h_new = Expr::Lit(1.0)
                .sub(z())
                .mul(n)
                .add(z().mul(Expr::load("h_prev", Index::var(&i))));
            vec![
                Stmt::for_loop(&i0, h, vec![Stmt::assign("h_prev", Index::var(&i0), Expr::Lit(0.0))]),
                Stmt::for_loop(
                    &t,
                    steps,
                    vec![
                        Stmt::for_loop(
                            &g,
                            3 * h,
                            vec![
                                Stmt::assign("gx", gi.clone(), Expr::load(bx, gi.clone())),
                                Stmt::for_loop(
                                    &ch,
                                    c,
                                    vec![Stmt::assign(
                                        "gx",
                                        gi.clone(),
                                        Expr::load("gx", gi.clone()).add(
                                            Expr::load(wx, Index::default().term(&g, c as i64).term(&ch, 1))
                                                .mul(Expr::load(x, Index::default().term(&ch, steps as i64).term(&t, 1))),
                                        ),
                                    )],
                                ),
                            ],
                        ),
                        Stmt::for_loop(
                            &g2,
                            3 * h,
                            vec![
                                Stmt::assign("gh", g2i.clone(), Expr::load(bh, g2i.clone())),
                                Stmt::for_loop(
                                    &j,
                                    h,
                                    vec![Stmt::assign(
                                        "gh",
                                        g2i.clone(),
                                        Expr::load("gh", g2i.clone()).add(
                                            Expr::load(wh, Index::default().term(&g2, h as i64).term(&j, 1))
                                                .mul(Expr::load("h_prev", Index::var(&j))),
                                        ),
                                    )],
                                ),
                            ],
                        ),
                        Stmt::for_loop(&i, h, vec![Stmt::assign("h_next", Index::var(&i), h_new)]),
                        Stmt::for_loop(
                            &i2,
                            h,
                            vec![
                                Stmt::assign("h_prev", Index::var(&i2), Expr::load("h_next", Index::var(&i2))),
                                Stmt::assign(
                                    out,
                                    Index::default().term(&i2, steps as i64).term(&t, 1),
                                    Expr::load("h_next", Index::var(&i2)),
                                ),
                            ],
                        ),
                    ],
                ),
            ]
        }
        OpKind::Softmax => {
            let cols = *out_shape.last().unwrap();
            let rows = n_out / cols;
            locals = vec![
                Buffer::new("row_max", vec![1], BufferRole::Scratch),
                Buffer::new("row_sum", vec![1], BufferRole::Scratch),
            ];
            let row = if rows > 1 { Some(vars.next()) } else { None };
            let (a, b, c) = (vars.next(), vars.next(), vars.next());
            let base = match &row {
                Some(r) => Index::default().term(r, cols as i64),
                None => Index::default(),
            };
            let zero = Index::constant(0);
            let x = inp(0);
            let stmts = vec![
                Stmt::assign("row_max", zero.clone(), Expr::load(x, base.clone())),
                Stmt::assign("row_sum", zero.clone(), Expr::Lit(0.0)),
                Stmt::for_loop(
                    &a,
                    cols,
                    vec![Stmt::assign(
                        "row_max",
                        zero.clone(),
                        Expr::bin(
                            BinOp::Max,
                            Expr::load("row_max", zero.clone()),
                            Expr::load(x, base.clone().term(&a, 1)),
                        ),
                    )],
                ),
                Stmt::for_loop(
                    &b,
                    cols,
                    vec![
                        Stmt::assign(
                            out,
                            base.clone().term(&b, 1),
                            Expr::call(
                                Intrinsic::Exp,
                                Expr::load(x, base.clone().term(&b, 1)).sub(Expr::load("row_max", zero.clone())),
                            ),
                        ),
                        Stmt::assign(
                            "row_sum",
                            zero.clone(),
                            Expr::load("row_sum", zero.clone()).add(Expr::load(out, base.clone().term(&b, 1))),
                        ),
                    ],
                ),
                Stmt::for_loop(
                    &c,
                    cols,
                    vec![Stmt::assign(
                        out,
                        base.clone().term(&c, 1),
                        Expr::load(out, base.clone().term(&c, 1)).div(Expr::load("row_sum", zero.clone())),
                    )],
                ),
            ];
            match row {
                Some(r) => vec![Stmt::for_loop(&r, rows, stmts)],
                None => stmts,
            }
        }
        OpKind::LastTimestep => {
            let steps = shape_of(inp(0))?[2];
            let i = vars.next();
            vec![Stmt::for_loop(
                &i,
                n_out,
                vec![Stmt::assign(
                    out,
                    Index::var(&i),
                    Expr::load(inp(0), Index::default().term(&i, steps as i64).plus(steps as i64 - 1)),
                )],
            )]
        }
    };

    Ok(TirFunc {
        name: op.id.clone(),
        params,
        locals,
        body,
        source_op: op.id.clone(),
    })
}

/// A call into an accelerator kernel covering one matched region.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternCall {
    pub accel: String,
    pub pattern: String,
    pub symbol: String,
    /// Region ops, in chain order.
    pub ops: Vec<ValueId>,
    /// Pointer arguments before the output, in signature order.
    pub operands: Vec<ValueId>,
    pub output: ValueId,
    pub dims: Vec<i32>,
    /// Reference loop nests for the region after the accelerator's TIR passes.
    pub prim_funcs: Vec<TirFunc>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Call {
    Func(usize),
    Extern(ExternCall),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoweredModule {
    pub funcs: Vec<TirFunc>,
    pub calls: Vec<Call>,
}

impl LoweredModule {
    pub fn extern_calls(&self) -> impl Iterator<Item = &ExternCall> {
        self.calls.iter().filter_map(|c| match c {
            Call::Extern(e) => Some(e),
            Call::Func(_) => None,
        })
    }
}

/// Lowers every CPU op to a function and every accelerator region to an
/// extern call, in schedule order.
pub fn lower_module(
    m: &HirModule,
    schedule: &[ValueId],
    registry: &AccelRegistry,
    report: &PartitionReport,
    exec: Exec,
) -> Result<LoweredModule, TirError> {
    let region_of: BTreeMap<&str, usize> = report
        .regions
        .iter()
        .enumerate()
        .flat_map(|(ri, r)| r.ops.iter().map(move |o| (o.as_str(), ri)))
        .collect();

    enum Item<'a> {
        Cpu(&'a HirOp),
        Region(usize),
    }
    let mut items = Vec::new();
    for id in schedule {
        let op = m.op(id).ok_or_else(|| TirError::MissingShape(id.clone()))?;
        match region_of.get(id.as_str()) {
            Some(&ri) => {
                // regions run at the position of their last op
                if report.regions[ri].ops.last() == Some(id) {
                    items.push(Item::Region(ri));
                }
            }
            None => items.push(Item::Cpu(op)),
        }
    }

    enum Lowered {
        Func(TirFunc),
        Extern(ExternCall),
    }
    let lowered: Vec<Result<Lowered, TirError>> = exec::map(exec, &items, |item| match item {
        Item::Cpu(op) => {
            let f = lower_op(m, op)?;
            check_bounds(&f)?;
            Ok(Lowered::Func(f))
        }
        Item::Region(ri) => lower_region(m, registry, &report.regions[*ri]).map(Lowered::Extern),
    });

    let mut out = LoweredModule::default();
    for item in lowered {
        match item? {
            Lowered::Func(f) => {
                out.calls.push(Call::Func(out.funcs.len()));
                out.funcs.push(f);
            }
            Lowered::Extern(e) => out.calls.push(Call::Extern(e)),
        }
    }
    Ok(out)
}

fn lower_region(m: &HirModule, registry: &AccelRegistry, region: &accel::Region) -> Result<ExternCall, TirError> {
    let desc = registry
        .get(&region.accel)
        .ok_or_else(|| TirError::Unsupported {
            op: region.ops[0].clone(),
            kind: "region",
            reason: format!("accelerator `{}` is not registered", region.accel),
        })?;
    let mut prim_funcs = Vec::with_capacity(region.ops.len());
    for id in &region.ops {
        let op = m.op(id).ok_or_else(|| TirError::MissingShape(id.clone()))?;
        let f = run_tir_passes(lower_any(m, op)?, &desc.tir_passes)?;
        check_bounds(&f)?;
        prim_funcs.push(f);
    }
    Ok(ExternCall {
        accel: region.accel.clone(),
        pattern: region.pattern.clone(),
        symbol: desc.symbol(&region.pattern),
        ops: region.ops.clone(),
        operands: accel::region_operands(m, region),
        output: region.ops.last().unwrap().clone(),
        dims: accel::region_dims(m, region),
        prim_funcs,
    })
}

/// Executes a lowered module directly, returning the value of every buffer.
pub fn run_lowered(
    m: &HirModule,
    lowered: &LoweredModule,
    inputs: &BTreeMap<String, Vec<f32>>,
) -> Result<HashMap<String, Vec<f32>>, TirError> {
    let mut buffers: HashMap<String, Vec<f32>> = HashMap::new();
    for op in &m.ops {
        let len: usize = op
            .shape()
            .ok_or_else(|| TirError::MissingShape(op.id.clone()))?
            .iter()
            .product();
        let data = match &op.kind {
            OpKind::Input { .. } => inputs
                .get(&op.id)
                .cloned()
                .ok_or_else(|| TirError::Unbound(op.id.clone()))?,
            OpKind::Const { data, .. } => data.to_vec(),
            _ => vec![0.0; len],
        };
        buffers.insert(op.id.clone(), data);
    }
    for call in &lowered.calls {
        match call {
            Call::Func(i) => eval_func(&lowered.funcs[*i], &mut buffers)?,
            Call::Extern(e) => {
                for f in &e.prim_funcs {
                    eval_func(f, &mut buffers)?;
                }
            }
        }
    }
    Ok(buffers)
}
