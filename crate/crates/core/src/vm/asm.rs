//! Text assembly for contract programs.
//!
//! ```text
//! contract Bank width=64 {
//!   data 0x00ff
//!   fn deposit external selector=0xd0e30db0 {
//!         CALLER SLOAD CALLVALUE ADD CALLER SSTORE STOP
//!   }
//!   fn fallback external {
//!   top:  JUMPDEST
//!         CALLER PUSH 0 PUSH 0 PUSH 0 CALL target=Vault
//!         JUMPI top
//!         STOP
//!   }
//! }
//! ```
//!
//! Numeric jump operands are byte offsets within the function body; symbolic
//! operands name labels. `ICALL` takes a function name or id. A function named
//! `fallback` without selector is the contract's fallback.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::isa::{FunctionId, Instruction};
use super::program::{ContractProgram, FunctionDef, Visibility};
use crate::error::{Error, Result};
use crate::word::{Width, Word};

#[derive(Debug, Clone)]
struct Token {
    text: String,
    line: usize,
}

fn tokenize(src: &str) -> Vec<Token> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let line = line.split("//").next().unwrap_or("");
        for piece in line.split_whitespace() {
            // braces may be glued to words
            let mut cur = String::new();
            for ch in piece.chars() {
                if ch == '{' || ch == '}' {
                    if !cur.is_empty() {
                        out.push(Token { text: std::mem::take(&mut cur), line: i + 1 });
                    }
                    out.push(Token { text: ch.to_string(), line: i + 1 });
                } else {
                    cur.push(ch);
                }
            }
            if !cur.is_empty() {
                out.push(Token { text: cur, line: i + 1 });
            }
        }
    }
    out
}

fn parse_number(s: &str) -> Option<u128> {
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u128::from_str_radix(&h.replace('_', ""), 16).ok()
    } else {
        s.replace('_', "").parse().ok()
    }
}

#[derive(Debug)]
enum Operand {
    Label(String),
    Number(u128),
}

#[derive(Debug)]
enum Pending {
    Ready(Instruction),
    Jump { conditional: bool, target: Operand },
    ICall(Operand),
}

struct RawFunction {
    name: String,
    visibility: Visibility,
    selector: Option<u32>,
    items: Vec<(Pending, usize)>,
    labels: BTreeMap<String, usize>,
    line: usize,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn last_line(&self) -> usize {
        self.toks.last().map(|t| t.line).unwrap_or(1)
    }

    fn next(&mut self) -> Result<Token> {
        let t = self.toks.get(self.pos).cloned().ok_or_else(|| Error::Syntax {
            line: self.last_line(),
            msg: "unexpected end of input".into(),
        })?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, text: &str) -> Result<Token> {
        let t = self.next()?;
        if t.text != text {
            return Err(Error::Syntax { line: t.line, msg: format!("expected `{text}`, found `{}`", t.text) });
        }
        Ok(t)
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Assembles source text into a validated program.
pub fn assemble(source: &str) -> Result<ContractProgram> {
    let mut p = Parser { toks: tokenize(source), pos: 0 };
    p.expect("contract")?;
    let name_tok = p.next()?;
    if !is_ident(&name_tok.text) {
        return Err(Error::Syntax { line: name_tok.line, msg: format!("bad contract name `{}`", name_tok.text) });
    }
    let mut width = Width::W64;
    while let Some(t) = p.peek() {
        if t.text == "{" {
            break;
        }
        let t = p.next()?;
        match t.text.strip_prefix("width=").and_then(parse_number) {
            Some(bits) => {
                width = Width::new(bits as u32).map_err(|_| Error::Syntax { line: t.line, msg: format!("unsupported width {bits}") })?
            }
            None => return Err(Error::Syntax { line: t.line, msg: format!("unexpected `{}`", t.text) }),
        }
    }
    p.expect("{")?;
    let mut data = Vec::new();
    let mut raws: Vec<RawFunction> = Vec::new();
    loop {
        let t = p.next()?;
        match t.text.as_str() {
            "}" => break,
            "data" => {
                let d = p.next()?;
                let h = d.text.strip_prefix("0x").unwrap_or(&d.text);
                data = hex::decode(h).map_err(|e| Error::Syntax { line: d.line, msg: format!("bad data: {e}") })?;
            }
            "fn" => raws.push(parse_function(&mut p, t.line)?),
            other => return Err(Error::Syntax { line: t.line, msg: format!("expected `fn`, found `{other}`") }),
        }
    }
    if let Some(t) = p.peek() {
        return Err(Error::Syntax { line: t.line, msg: format!("trailing input `{}`", t.text) });
    }

    let ids: BTreeMap<String, FunctionId> =
        raws.iter().enumerate().map(|(i, r)| (r.name.clone(), i as FunctionId)).collect();
    let mut functions = Vec::new();
    let mut fallback = None;
    for (i, raw) in raws.into_iter().enumerate() {
        let body = resolve_body(&raw, &ids, width)?;
        if raw.name == "fallback" && raw.selector.is_none() && raw.visibility == Visibility::External {
            fallback = Some(i as FunctionId);
        }
        if raw.selector.is_some() && raw.visibility == Visibility::Internal {
            return Err(Error::Syntax { line: raw.line, msg: "internal function cannot have a selector".into() });
        }
        functions.push(FunctionDef {
            id: i as FunctionId,
            name: raw.name,
            visibility: raw.visibility,
            selector: raw.selector,
            body,
        });
    }
    let program = ContractProgram { name: name_tok.text, width, functions, fallback, data };
    program.validate()?;
    Ok(program)
}

fn parse_function(p: &mut Parser, line: usize) -> Result<RawFunction> {
    let name = p.next()?;
    if !is_ident(&name.text) {
        return Err(Error::Syntax { line: name.line, msg: format!("bad function name `{}`", name.text) });
    }
    let mut raw = RawFunction {
        name: name.text,
        visibility: Visibility::Internal,
        selector: None,
        items: Vec::new(),
        labels: BTreeMap::new(),
        line,
    };
    loop {
        let t = p.next()?;
        match t.text.as_str() {
            "{" => break,
            "external" => raw.visibility = Visibility::External,
            "internal" => raw.visibility = Visibility::Internal,
            s if s.starts_with("selector=") => {
                let v = parse_number(&s["selector=".len()..])
                    .filter(|v| *v <= u32::MAX as u128)
                    .ok_or_else(|| Error::Syntax { line: t.line, msg: format!("bad selector `{s}`") })?;
                raw.selector = Some(v as u32);
            }
            other => return Err(Error::Syntax { line: t.line, msg: format!("unexpected `{other}` in function header") }),
        }
    }
    loop {
        let t = p.next()?;
        if t.text == "}" {
            break;
        }
        if let Some(label) = t.text.strip_suffix(':') {
            if !is_ident(label) {
                return Err(Error::Syntax { line: t.line, msg: format!("bad label `{label}`") });
            }
            if raw.labels.insert(label.to_string(), raw.items.len()).is_some() {
                return Err(Error::Syntax { line: t.line, msg: format!("duplicate label `{label}`") });
            }
            continue;
        }
        let item = parse_instruction(p, &t)?;
        raw.items.push((item, t.line));
    }
    Ok(raw)
}

fn operand(p: &mut Parser, mnemonic: &Token) -> Result<Operand> {
    let t = p.next()?;
    if let Some(n) = parse_number(&t.text) {
        Ok(Operand::Number(n))
    } else if is_ident(&t.text) {
        Ok(Operand::Label(t.text))
    } else {
        Err(Error::Syntax { line: t.line, msg: format!("bad operand `{}` for {}", t.text, mnemonic.text) })
    }
}

fn parse_instruction(p: &mut Parser, t: &Token) -> Result<Pending> {
    use Instruction::*;
    let upper = t.text.to_ascii_uppercase();
    let simple = match upper.as_str() {
        "POP" => Some(Pop),
        "ADD" => Some(Add),
        "SUB" => Some(Sub),
        "MUL" => Some(Mul),
        "DIV" => Some(Div),
        "MOD" => Some(Mod),
        "LT" => Some(Lt),
        "GT" => Some(Gt),
        "EQ" => Some(Eq),
        "ISZERO" => Some(IsZero),
        "AND" => Some(And),
        "OR" => Some(Or),
        "XOR" => Some(Xor),
        "NOT" => Some(Not),
        "SHR" => Some(Shr),
        "JUMPDEST" => Some(JumpDest),
        "MLOAD" => Some(MLoad),
        "MSTORE" => Some(MStore),
        "SLOAD" => Some(SLoad),
        "SSTORE" => Some(SStore),
        "CALLDATALOAD" => Some(CallDataLoad),
        "CALLDATASIZE" => Some(CallDataSize),
        "CALLER" => Some(Caller),
        "ORIGIN" => Some(Origin),
        "ADDRESS" => Some(Address),
        "CALLVALUE" => Some(CallValue),
        "BALANCE" => Some(Balance),
        "IRET" => Some(IRet),
        "RETURN" => Some(Return),
        "REVERT" => Some(Revert),
        "STOP" => Some(Stop),
        "RETURNDATALOAD" => Some(ReturnDataLoad),
        "RETURNDATASIZE" => Some(ReturnDataSize),
        "CODELOAD" => Some(CodeLoad),
        "LOG" => Some(Log),
        _ => None,
    };
    if let Some(i) = simple {
        return Ok(Pending::Ready(i));
    }
    match upper.as_str() {
        "PUSH" => match operand(p, t)? {
            Operand::Number(n) if n <= u64::MAX as u128 => Ok(Pending::Ready(Push(n as Word))),
            _ => Err(Error::Syntax { line: t.line, msg: "PUSH needs a numeric immediate".into() }),
        },
        "DUP" | "SWAP" => match operand(p, t)? {
            Operand::Number(n) if (1..=16).contains(&n) => Ok(Pending::Ready(if upper == "DUP" {
                Dup(n as u8)
            } else {
                Swap(n as u8)
            })),
            _ => Err(Error::Syntax { line: t.line, msg: format!("{upper} needs an index in 1..=16") }),
        },
        "JUMP" | "JUMPI" => Ok(Pending::Jump { conditional: upper == "JUMPI", target: operand(p, t)? }),
        "ICALL" => Ok(Pending::ICall(operand(p, t)?)),
        "CALL" | "DELEGATECALL" => {
            let mut target = None;
            if let Some(next) = p.peek() {
                if let Some(name) = next.text.strip_prefix("target=") {
                    if !is_ident(name) {
                        return Err(Error::Syntax { line: next.line, msg: format!("bad call target `{name}`") });
                    }
                    target = Some(name.to_string());
                    p.pos += 1;
                }
            }
            Ok(Pending::Ready(if upper == "CALL" { Call(target) } else { DelegateCall(target) }))
        }
        _ => Err(Error::Syntax { line: t.line, msg: format!("unknown mnemonic `{}`", t.text) }),
    }
}

fn resolve_body(raw: &RawFunction, ids: &BTreeMap<String, FunctionId>, width: Width) -> Result<Vec<Instruction>> {
    // byte offset of each instruction, for numeric jump operands
    let mut starts = Vec::with_capacity(raw.items.len());
    let mut off = 0usize;
    for (item, _) in &raw.items {
        starts.push(off);
        off += match item {
            Pending::Ready(i) => i.encoded_size(width),
            _ => 1 + width.bytes(),
        };
    }
    let mut body = Vec::with_capacity(raw.items.len());
    for (idx, (item, line)) in raw.items.iter().enumerate() {
        let ins = match item {
            Pending::Ready(i) => i.clone(),
            Pending::Jump { conditional, target } => {
                let t = match target {
                    Operand::Label(l) => *raw
                        .labels
                        .get(l)
                        .ok_or_else(|| Error::UndefinedLabel { line: *line, label: l.clone() })?,
                    Operand::Number(n) => match starts.binary_search(&(*n as usize)) {
                        Ok(i) => i,
                        Err(_) if (*n as usize) < off => {
                            return Err(Error::JumpIntoImmediate { function: raw.name.clone(), offset: idx })
                        }
                        Err(_) => {
                            return Err(Error::InvalidJumpTarget { function: raw.name.clone(), offset: idx, target: *n as usize })
                        }
                    },
                };
                if *conditional {
                    Instruction::JumpI(t)
                } else {
                    Instruction::Jump(t)
                }
            }
            Pending::ICall(target) => match target {
                Operand::Label(name) => Instruction::ICall(
                    *ids.get(name).ok_or_else(|| Error::UndefinedLabel { line: *line, label: name.clone() })?,
                ),
                Operand::Number(n) => Instruction::ICall(*n as FunctionId),
            },
        };
        body.push(ins);
    }
    Ok(body)
}

/// Renders a program as assembly text; `assemble` of the result yields a
/// structurally equal program.
pub fn disassemble(program: &ContractProgram) -> String {
    disassemble_with(program, |_, _| None)
}

/// Like [`disassemble`], letting the caller choose label names for jump
/// targets (`label(function, offset)`); unnamed targets become `L<offset>`.
pub fn disassemble_with(program: &ContractProgram, label: impl Fn(FunctionId, usize) -> Option<String>) -> String {
    let mut out = String::new();
    let _ = write!(out, "contract {}", program.name);
    if program.width != Width::W64 {
        let _ = write!(out, " width={}", program.width.bits());
    }
    out.push_str(" {\n");
    if !program.data.is_empty() {
        let _ = writeln!(out, "  data 0x{}", hex::encode(&program.data));
    }
    for f in &program.functions {
        let vis = match f.visibility {
            Visibility::External => "external",
            Visibility::Internal => "internal",
        };
        let _ = write!(out, "  fn {} {}", f.name, vis);
        if let Some(sel) = f.selector {
            let _ = write!(out, " selector={sel:#010x}");
        }
        out.push_str(" {\n");
        let targets: BTreeMap<usize, String> = f
            .body
            .iter()
            .filter_map(|i| i.jump_target())
            .map(|t| (t, label(f.id, t).unwrap_or_else(|| format!("L{t}"))))
            .collect();
        for (off, ins) in f.body.iter().enumerate() {
            if let Some(l) = targets.get(&off) {
                let _ = writeln!(out, "  {l}:");
            }
            let text = match ins {
                Instruction::Jump(t) => format!("JUMP {}", targets[t]),
                Instruction::JumpI(t) => format!("JUMPI {}", targets[t]),
                Instruction::ICall(id) => format!(
                    "ICALL {}",
                    program.function(*id).map(|g| g.name.clone()).unwrap_or_else(|| id.to_string())
                ),
                other => other.to_string(),
            };
            let _ = writeln!(out, "      {text}");
        }
        out.push_str("  }\n");
    }
    out.push_str("}\n");
    out
}
