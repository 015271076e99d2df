//! `agent.<method>(args)` call syntax: a small Python-literal parser and the
//! canonical formatter.

use super::{Action, ActionError, ActionKind, Button, TextPosition};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    None,
    List(Vec<Value>),
}

impl Value {
    fn type_name(&self) -> &'static str {
        match self {
            Value::Str(_) => "string",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Bool(_) => "bool",
            Value::None => "None",
            Value::List(_) => "list",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallArg {
    pub name: Option<String>,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCall {
    pub method: String,
    pub args: Vec<CallArg>,
    /// Byte offset just past the closing parenthesis.
    pub end: usize,
}

/// A fenced block from a model response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    pub lang: String,
    pub body: String,
}

/// Splits out every ```-fenced block, in order. An unterminated trailing
/// fence runs to the end of the text.
pub fn extract_code_blocks(text: &str) -> Vec<CodeBlock> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let line_end = after.find('\n').unwrap_or(after.len());
        let first_line = &after[..line_end];
        // A one-line fence like ```DONE``` closes on its opening line.
        if let Some(close) = first_line.find("```") {
            blocks.push(CodeBlock {
                lang: String::new(),
                body: first_line[..close].trim().to_string(),
            });
            rest = &after[close + 3..];
            continue;
        }
        let lang = first_line.trim().to_string();
        let body_region = &after[(line_end + 1).min(after.len())..];
        match body_region.find("```") {
            Some(close) => {
                blocks.push(CodeBlock {
                    lang,
                    body: body_region[..close].trim_end().to_string(),
                });
                rest = &body_region[close + 3..];
            }
            None => {
                blocks.push(CodeBlock {
                    lang,
                    body: body_region.trim_end().to_string(),
                });
                break;
            }
        }
    }
    blocks
}

/// Parses an action from either a fenced response block or a bare call.
pub fn parse_action(text: &str) -> Result<Action, ActionError> {
    let trimmed = text.trim();
    if text.contains("```") && !trimmed.starts_with("agent.") {
        return parse_action_block(text).map(|(a, _)| a);
    }
    if trimmed.starts_with("agent.") {
        let call = parse_call(trimmed)?;
        if !trimmed[call.end..].trim().is_empty() {
            tracing::warn!("trailing text after action call ignored");
        }
        return action_from_call(&call);
    }
    Err(ActionError::NoActionBlock)
}

/// Parses the first `agent.*` call found in a fenced block. Extra calls or
/// blocks are ignored and reported as warnings.
pub fn parse_action_block(text: &str) -> Result<(Action, Vec<String>), ActionError> {
    let blocks = extract_code_blocks(text);
    let mut warnings = Vec::new();
    let mut candidates = blocks.iter().filter(|b| b.body.contains("agent."));
    let block = candidates.next().ok_or(ActionError::NoActionBlock)?;
    if candidates.next().is_some() {
        warnings.push("multiple action blocks; using the first".to_string());
    }
    let start = block.body.find("agent.").expect("filtered on agent.");
    let src = &block.body[start..];
    let call = parse_call(src)?;
    if src[call.end..].contains("agent.") {
        warnings.push("multiple actions in one block; using the first".to_string());
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    Ok((action_from_call(&call)?, warnings))
}

/// Parses `agent.<name>(...)` at the start of `src`.
pub fn parse_call(src: &str) -> Result<ParsedCall, ActionError> {
    let mut p = Parser::new(src);
    p.skip_ws();
    if !p.eat_str("agent.") {
        return Err(ActionError::Syntax("expected `agent.`".into()));
    }
    let method = p.ident().ok_or_else(|| ActionError::Syntax("expected method name".into()))?;
    p.skip_ws();
    if !p.eat('(') {
        return Err(ActionError::Syntax(format!("expected `(` after `{method}`")));
    }
    let mut args = Vec::new();
    loop {
        p.skip_ws();
        if p.eat(')') {
            break;
        }
        let save = p.pos;
        let mut name = None;
        if let Some(id) = p.ident() {
            p.skip_ws();
            if p.peek() == Some('=') && p.peek_at(1) != Some('=') {
                p.pos += 1;
                name = Some(id);
            } else {
                p.pos = save;
            }
        }
        p.skip_ws();
        let value = p.value()?;
        if name.is_none() && args.iter().any(|a: &CallArg| a.name.is_some()) {
            return Err(ActionError::Syntax("positional argument after keyword argument".into()));
        }
        args.push(CallArg { name, value });
        p.skip_ws();
        if p.eat(',') {
            continue;
        }
        p.skip_ws();
        if p.eat(')') {
            break;
        }
        return Err(ActionError::Syntax(format!("unexpected input at offset {}", p.pos)));
    }
    Ok(ParsedCall {
        method,
        args,
        end: p.pos,
    })
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn peek_at(&self, n: usize) -> Option<char> {
        self.rest().chars().nth(n)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn eat_str(&mut self, s: &str) -> bool {
        if self.rest().starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn ident(&mut self) -> Option<String> {
        let rest = self.rest();
        let mut end = 0;
        for (i, c) in rest.char_indices() {
            let ok = if i == 0 {
                c.is_ascii_alphabetic() || c == '_'
            } else {
                c.is_ascii_alphanumeric() || c == '_'
            };
            if !ok {
                break;
            }
            end = i + c.len_utf8();
        }
        if end == 0 {
            return None;
        }
        self.pos += end;
        Some(rest[..end].to_string())
    }

    fn value(&mut self) -> Result<Value, ActionError> {
        match self.peek() {
            Some('"') | Some('\'') => self.string().map(Value::Str),
            Some('[') | Some('(') => self.list(),
            Some(c) if c == '-' || c == '+' || c == '.' || c.is_ascii_digit() => self.number(),
            Some(_) => {
                let id = self
                    .ident()
                    .ok_or_else(|| ActionError::Syntax(format!("bad value at offset {}", self.pos)))?;
                match id.as_str() {
                    "True" | "true" => Ok(Value::Bool(true)),
                    "False" | "false" => Ok(Value::Bool(false)),
                    "None" | "null" => Ok(Value::None),
                    other => Err(ActionError::Syntax(format!("unsupported bare identifier `{other}`"))),
                }
            }
            None => Err(ActionError::Syntax("unexpected end of input".into())),
        }
    }

    fn list(&mut self) -> Result<Value, ActionError> {
        let close = if self.eat('[') {
            ']'
        } else {
            self.eat('(');
            ')'
        };
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(close) {
                return Ok(Value::List(items));
            }
            items.push(self.value()?);
            self.skip_ws();
            if self.eat(',') {
                continue;
            }
            self.skip_ws();
            if self.eat(close) {
                return Ok(Value::List(items));
            }
            return Err(ActionError::Syntax(format!("unterminated list at offset {}", self.pos)));
        }
    }

    fn number(&mut self) -> Result<Value, ActionError> {
        let rest = self.rest();
        let mut end = 0;
        let mut is_float = false;
        for (i, c) in rest.char_indices() {
            let ok = match c {
                '0'..='9' => true,
                '-' | '+' => i == 0 || matches!(rest[..i].chars().last(), Some('e' | 'E')),
                '.' | 'e' | 'E' => {
                    is_float = true;
                    true
                }
                _ => false,
            };
            if !ok {
                break;
            }
            end = i + 1;
        }
        let lit = &rest[..end];
        self.pos += end;
        if is_float {
            lit.parse::<f64>()
                .map(Value::Float)
                .map_err(|_| ActionError::Syntax(format!("bad number `{lit}`")))
        } else {
            lit.parse::<i64>()
                .map(Value::Int)
                .map_err(|_| ActionError::Syntax(format!("bad number `{lit}`")))
        }
    }

    fn string(&mut self) -> Result<String, ActionError> {
        let quote = self.peek().expect("caller checked quote");
        let triple: String = std::iter::repeat_n(quote, 3).collect();
        let is_triple = self.rest().starts_with(&triple);
        self.pos += if is_triple { 3 } else { 1 };
        let mut out = String::new();
        loop {
            let c = self
                .peek()
                .ok_or_else(|| ActionError::Syntax("unterminated string".into()))?;
            if is_triple {
                if self.rest().starts_with(&triple) {
                    self.pos += 3;
                    return Ok(out);
                }
            } else if c == quote {
                self.pos += 1;
                return Ok(out);
            }
            self.pos += c.len_utf8();
            if c != '\\' {
                out.push(c);
                continue;
            }
            let e = self
                .peek()
                .ok_or_else(|| ActionError::Syntax("unterminated escape".into()))?;
            self.pos += e.len_utf8();
            match e {
                'n' => out.push('\n'),
                't' => out.push('\t'),
                'r' => out.push('\r'),
                '0' => out.push('\0'),
                '\\' | '\'' | '"' => out.push(e),
                '\n' => {}
                'u' => {
                    let hex = self.rest().get(..4).unwrap_or("");
                    let ch = u32::from_str_radix(hex, 16)
                        .ok()
                        .and_then(char::from_u32)
                        .ok_or_else(|| ActionError::Syntax("bad \\u escape".into()))?;
                    self.pos += 4;
                    out.push(ch);
                }
                other => {
                    out.push('\\');
                    out.push(other);
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Ty {
    Str,
    OptStr,
    Int,
    Num,
    Bool,
    Keys,
}

struct Param {
    name: &'static str,
    aliases: &'static [&'static str],
    ty: Ty,
    required: bool,
}

const fn req(name: &'static str, aliases: &'static [&'static str], ty: Ty) -> Param {
    Param {
        name,
        aliases,
        ty,
        required: true,
    }
}

const fn opt(name: &'static str, aliases: &'static [&'static str], ty: Ty) -> Param {
    Param {
        name,
        aliases,
        ty,
        required: false,
    }
}

const DESC: &[&str] = &["element_description", "description"];
const CLICK: &[Param] = &[
    req("desc", DESC, Ty::Str),
    opt("num_clicks", &["clicks"], Ty::Int),
    opt("button", &["button_type"], Ty::Str),
    opt("hold_keys", &[], Ty::Keys),
];
const TYPE: &[Param] = &[
    req("desc", DESC, Ty::Str),
    req("text", &[], Ty::Str),
    opt("overwrite", &[], Ty::Bool),
    opt("enter", &["press_enter"], Ty::Bool),
    opt("terminal", &[], Ty::Bool),
];
const SCROLL: &[Param] = &[
    req("desc", DESC, Ty::Str),
    req("clicks", &[], Ty::Int),
    opt("shift", &[], Ty::Bool),
];
const DRAG: &[Param] = &[
    req("start_desc", &["starting_description"], Ty::Str),
    req("end_desc", &["ending_description"], Ty::Str),
    opt("hold_keys", &[], Ty::Keys),
];
const HIGHLIGHT: &[Param] = &[
    req("start_phrase", &[], Ty::Str),
    req("end_phrase", &[], Ty::Str),
    opt("button", &["button_type"], Ty::Str),
];
const LOCATE: &[Param] = &[
    req("phrase", &[], Ty::Str),
    opt("pos", &["position"], Ty::Str),
    opt("text", &[], Ty::OptStr),
];
const HOTKEY: &[Param] = &[req("keys", &[], Ty::Keys)];
const HOLD_PRESS: &[Param] = &[req("hold_keys", &[], Ty::Keys), req("press_keys", &[], Ty::Keys)];
const OPEN: &[Param] = &[req("app_or_filename", &["app_or_file_name", "name"], Ty::Str)];
const SEARCH: &[Param] = &[req("query", &[], Ty::Str)];
const CODE: &[Param] = &[req("task", &["subtask"], Ty::Str)];
const WAIT: &[Param] = &[req("seconds", &["time"], Ty::Num)];

fn schema(kind: ActionKind) -> &'static [Param] {
    match kind {
        ActionKind::Click => CLICK,
        ActionKind::Type => TYPE,
        ActionKind::Scroll => SCROLL,
        ActionKind::DragAndDrop => DRAG,
        ActionKind::HighlightTextSpan => HIGHLIGHT,
        ActionKind::LocateCursor => LOCATE,
        ActionKind::Hotkey => HOTKEY,
        ActionKind::HoldAndPress => HOLD_PRESS,
        ActionKind::Open => OPEN,
        ActionKind::CallSearchAgent => SEARCH,
        ActionKind::CallCodeAgent => CODE,
        ActionKind::Wait => WAIT,
        ActionKind::Done | ActionKind::Fail => &[],
    }
}

/// Arguments bound to schema slots.
struct Bound<'c> {
    method: &'c str,
    slots: Vec<Option<&'c Value>>,
    params: &'static [Param],
}

impl<'c> Bound<'c> {
    fn err(&self, detail: impl Into<String>) -> ActionError {
        ActionError::Arity {
            method: self.method.to_string(),
            detail: detail.into(),
        }
    }

    fn type_err(&self, i: usize, v: &Value) -> ActionError {
        let want = match self.params[i].ty {
            Ty::Str => "string",
            Ty::OptStr => "string or None",
            Ty::Int => "int",
            Ty::Num => "number",
            Ty::Bool => "bool",
            Ty::Keys => "list of keys",
        };
        self.err(format!("`{}` expects {want}, got {}", self.params[i].name, v.type_name()))
    }

    fn str(&self, i: usize) -> Result<Option<String>, ActionError> {
        match self.slots[i] {
            None => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s.clone())),
            Some(v) => Err(self.type_err(i, v)),
        }
    }

    fn opt_str(&self, i: usize) -> Result<Option<String>, ActionError> {
        match self.slots[i] {
            None | Some(Value::None) => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s.clone())),
            Some(v) => Err(self.type_err(i, v)),
        }
    }

    fn int(&self, i: usize) -> Result<Option<i64>, ActionError> {
        match self.slots[i] {
            None => Ok(None),
            Some(Value::Int(n)) => Ok(Some(*n)),
            Some(Value::Float(f)) if f.fract() == 0.0 && f.abs() < 1e15 => Ok(Some(*f as i64)),
            Some(v) => Err(self.type_err(i, v)),
        }
    }

    fn num(&self, i: usize) -> Result<Option<f64>, ActionError> {
        match self.slots[i] {
            None => Ok(None),
            Some(Value::Int(n)) => Ok(Some(*n as f64)),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(v) => Err(self.type_err(i, v)),
        }
    }

    fn bool(&self, i: usize) -> Result<bool, ActionError> {
        match self.slots[i] {
            None => Ok(false),
            Some(Value::Bool(b)) => Ok(*b),
            Some(Value::Int(n)) if *n == 0 || *n == 1 => Ok(*n == 1),
            Some(v) => Err(self.type_err(i, v)),
        }
    }

    fn keys(&self, i: usize) -> Result<Vec<String>, ActionError> {
        match self.slots[i] {
            None | Some(Value::None) => Ok(Vec::new()),
            Some(Value::List(items)) => items
                .iter()
                .map(|v| v.as_str().map(str::to_string).ok_or_else(|| self.type_err(i, v)))
                .collect(),
            // "ctrl+s" shorthand
            Some(Value::Str(s)) if s.len() > 1 && s.contains('+') => {
                Ok(s.split('+').map(|k| k.trim().to_string()).collect())
            }
            Some(Value::Str(s)) => Ok(vec![s.clone()]),
            Some(v) => Err(self.type_err(i, v)),
        }
    }

    fn button(&self, i: usize) -> Result<Button, ActionError> {
        match self.str(i)? {
            None => Ok(Button::Left),
            Some(s) => Button::parse(&s).ok_or_else(|| self.err(format!("unknown button `{s}`"))),
        }
    }
}

fn bind<'c>(call: &'c ParsedCall, kind: ActionKind) -> Result<Bound<'c>, ActionError> {
    let params = schema(kind);
    let mut bound = Bound {
        method: &call.method,
        slots: vec![None; params.len()],
        params,
    };
    let mut positional = 0;
    for arg in &call.args {
        let idx = match &arg.name {
            None => {
                let i = positional;
                positional += 1;
                if i >= params.len() {
                    return Err(bound.err(format!(
                        "takes at most {} arguments, got {}",
                        params.len(),
                        call.args.len()
                    )));
                }
                i
            }
            Some(name) => params
                .iter()
                .position(|p| p.name == name || p.aliases.contains(&name.as_str()))
                .ok_or_else(|| bound.err(format!("unexpected keyword `{name}`")))?,
        };
        if bound.slots[idx].is_some() {
            return Err(bound.err(format!("`{}` given twice", params[idx].name)));
        }
        bound.slots[idx] = Some(&arg.value);
    }
    for (i, p) in params.iter().enumerate() {
        if p.required && bound.slots[i].is_none() {
            return Err(bound.err(format!("missing `{}`", p.name)));
        }
    }
    Ok(bound)
}

pub(crate) fn action_from_call(call: &ParsedCall) -> Result<Action, ActionError> {
    let kind = ActionKind::from_method(&call.method)
        .ok_or_else(|| ActionError::UnknownAction(call.method.clone()))?;
    let b = bind(call, kind)?;
    let s = |i| b.str(i).map(|v| v.expect("required"));
    let action = match kind {
        ActionKind::Click => {
            let n = b.int(1)?.unwrap_or(1);
            if !(0..=i64::from(u32::MAX)).contains(&n) {
                return Err(b.err("num_clicks out of range"));
            }
            Action::Click {
                desc: s(0)?,
                num_clicks: n as u32,
                button: b.button(2)?,
                hold_keys: b.keys(3)?,
            }
        }
        ActionKind::Type => Action::Type {
            desc: s(0)?,
            text: s(1)?,
            overwrite: b.bool(2)?,
            enter: b.bool(3)?,
            terminal: b.bool(4)?,
        },
        ActionKind::Scroll => {
            let c = b.int(1)?.expect("required");
            let clicks = i32::try_from(c).map_err(|_| b.err("clicks out of range"))?;
            Action::Scroll {
                desc: s(0)?,
                clicks,
                shift: b.bool(2)?,
            }
        }
        ActionKind::DragAndDrop => Action::DragAndDrop {
            start_desc: s(0)?,
            end_desc: s(1)?,
            hold_keys: b.keys(2)?,
        },
        ActionKind::HighlightTextSpan => Action::HighlightTextSpan {
            start_phrase: s(0)?,
            end_phrase: s(1)?,
            button: b.button(2)?,
        },
        ActionKind::LocateCursor => {
            let pos = match b.str(1)? {
                None => TextPosition::Start,
                Some(p) => TextPosition::parse(&p).ok_or_else(|| b.err(format!("unknown position `{p}`")))?,
            };
            Action::LocateCursor {
                phrase: s(0)?,
                pos,
                text: b.opt_str(2)?,
            }
        }
        ActionKind::Hotkey => Action::Hotkey { keys: b.keys(0)? },
        ActionKind::HoldAndPress => Action::HoldAndPress {
            hold_keys: b.keys(0)?,
            press_keys: b.keys(1)?,
        },
        ActionKind::Open => Action::Open {
            app_or_filename: s(0)?,
        },
        ActionKind::CallSearchAgent => Action::CallSearchAgent { query: s(0)? },
        ActionKind::CallCodeAgent => Action::CallCodeAgent { task: s(0)? },
        ActionKind::Wait => Action::Wait {
            seconds: b.num(0)?.expect("required"),
        },
        ActionKind::Done => Action::Done,
        ActionKind::Fail => Action::Fail,
    };
    Ok(action)
}

fn quote(s: &str, q: char) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push(q);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '\0' => out.push_str("\\0"),
            c if c == q => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(q);
    out
}

fn dq(s: &str) -> String {
    quote(s, '"')
}

fn key_list(keys: &[String]) -> String {
    let items: Vec<String> = keys.iter().map(|k| quote(k, '\'')).collect();
    format!("[{}]", items.join(", "))
}

fn py_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

fn py_float(x: f64) -> String {
    let s = format!("{x}");
    if s.contains(['.', 'e', 'E']) {
        s
    } else {
        format!("{s}.0")
    }
}

/// Canonical call text. Trailing parameters at their defaults are omitted,
/// except click's count and button which are always written.
pub fn format_action(a: &Action) -> String {
    let args: Vec<String> = match a {
        Action::Click {
            desc,
            num_clicks,
            button,
            hold_keys,
        } => {
            let mut v = vec![dq(desc), num_clicks.to_string(), dq(button.as_str())];
            if !hold_keys.is_empty() {
                v.push(key_list(hold_keys));
            }
            v
        }
        Action::Type {
            desc,
            text,
            overwrite,
            enter,
            terminal,
        } => {
            let mut v = vec![dq(desc), dq(text)];
            for (name, flag) in [("overwrite", overwrite), ("enter", enter), ("terminal", terminal)] {
                if *flag {
                    v.push(format!("{name}={}", py_bool(true)));
                }
            }
            v
        }
        Action::Scroll { desc, clicks, shift } => {
            let mut v = vec![dq(desc), clicks.to_string()];
            if *shift {
                v.push("shift=True".into());
            }
            v
        }
        Action::DragAndDrop {
            start_desc,
            end_desc,
            hold_keys,
        } => {
            let mut v = vec![dq(start_desc), dq(end_desc)];
            if !hold_keys.is_empty() {
                v.push(format!("hold_keys={}", key_list(hold_keys)));
            }
            v
        }
        Action::HighlightTextSpan {
            start_phrase,
            end_phrase,
            button,
        } => {
            let mut v = vec![dq(start_phrase), dq(end_phrase)];
            if *button != Button::Left {
                v.push(format!("button={}", dq(button.as_str())));
            }
            v
        }
        Action::LocateCursor { phrase, pos, text } => {
            let mut v = vec![dq(phrase), dq(pos.as_str())];
            if let Some(t) = text {
                v.push(format!("text={}", dq(t)));
            }
            v
        }
        Action::Hotkey { keys } => vec![key_list(keys)],
        Action::HoldAndPress { hold_keys, press_keys } => vec![key_list(hold_keys), key_list(press_keys)],
        Action::Open { app_or_filename } => vec![dq(app_or_filename)],
        Action::CallSearchAgent { query } => vec![dq(query)],
        Action::CallCodeAgent { task } => vec![dq(task)],
        Action::Wait { seconds } => vec![py_float(*seconds)],
        Action::Done | Action::Fail => vec![],
    };
    format!("agent.{}({})", a.kind().method_name(), args.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_prompt_example() {
        let a = parse_action(r#"agent.click("The menu button at the top right of the window", 1, "left")"#).unwrap();
        assert_eq!(
            a,
            Action::Click {
                desc: "The menu button at the top right of the window".into(),
                num_clicks: 1,
                button: Button::Left,
                hold_keys: vec![],
            }
        );
    }

    #[test]
    fn done_and_unknown() {
        assert_eq!(parse_action("agent.done()").unwrap(), Action::Done);
        assert_eq!(
            parse_action(r#"agent.fly("up")"#),
            Err(ActionError::UnknownAction("fly".into()))
        );
    }

    #[test]
    fn no_block() {
        assert_eq!(parse_action("I will click the button"), Err(ActionError::NoActionBlock));
        assert!(matches!(
            parse_action_block("agent.done()"),
            Err(ActionError::NoActionBlock)
        ));
    }

    #[test]
    fn hotkey_format() {
        assert_eq!(format_action(&Action::hotkey(["ctrl", "c"])), "agent.hotkey(['ctrl', 'c'])");
        assert_eq!(format_action(&Action::Done), "agent.done()");
    }

    #[test]
    fn defaults_and_keywords() {
        let a = parse_action(r#"agent.click(element_description='OK', button_type="right")"#).unwrap();
        assert_eq!(
            a,
            Action::Click {
                desc: "OK".into(),
                num_clicks: 1,
                button: Button::Right,
                hold_keys: vec![],
            }
        );
        let t = parse_action(r#"agent.type("search box", "hello", enter=True)"#).unwrap();
        assert!(matches!(t, Action::Type { enter: true, overwrite: false, terminal: false, .. }));
        let explicit = parse_action(r#"agent.click("x", 1, "left", [])"#).unwrap();
        assert_eq!(explicit, parse_action(r#"agent.click("x")"#).unwrap());
    }

    #[test]
    fn arity_errors() {
        assert!(matches!(parse_action(r#"agent.click()"#), Err(ActionError::Arity { .. })));
        assert!(matches!(parse_action(r#"agent.done(1)"#), Err(ActionError::Arity { .. })));
        assert!(matches!(
            parse_action(r#"agent.click("x", "two")"#),
            Err(ActionError::Arity { .. })
        ));
        assert!(matches!(
            parse_action(r#"agent.scroll("x", 1, bogus=True)"#),
            Err(ActionError::Arity { .. })
        ));
    }

    #[test]
    fn fenced_block_first_action_wins() {
        let resp = "(Grounded Action)\n```python\nagent.hotkey(['ctrl','s'])\nagent.done()\n```\n";
        let (a, warnings) = parse_action_block(resp).unwrap();
        assert_eq!(a, Action::hotkey(["ctrl", "s"]));
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn string_escapes_and_triple_quotes() {
        let a = parse_action(r#"agent.type("box", 'it\'s "fine"\n')"#).unwrap();
        assert!(matches!(a, Action::Type { ref text, .. } if text == "it's \"fine\"\n"));
        let b = parse_action("agent.call_code_agent(\"\"\"multi\nline\"\"\")").unwrap();
        assert_eq!(b, Action::CallCodeAgent { task: "multi\nline".into() });
    }

    #[test]
    fn hotkey_plus_shorthand() {
        assert_eq!(parse_action("agent.hotkey('ctrl+plus')").unwrap(), Action::hotkey(["ctrl", "plus"]));
    }

    #[test]
    fn one_line_fence() {
        let blocks = extract_code_blocks("(Answer)\n```DONE```");
        assert_eq!(blocks[0].body, "DONE");
    }
}
