//! Line-delimited JSON protocol for out-of-process environments.
//!
//! Each request is one JSON object per line with an `id` and a `verb`; the
//! reply echoes the `id` and carries `"ok": true` plus verb-specific fields,
//! or `"ok": false` with `{"error": {"kind", "message"}}`.
//!
//! | verb       | request fields                 | reply fields                               |
//! |------------|--------------------------------|--------------------------------------------|
//! | `hello`    |                                | `handle`, `capabilities`, `screen`         |
//! | `reset`    | `task_id`                      | `image`                                    |
//! | `observe`  |                                | `image`                                    |
//! | `execute`  | `action` (call text), `points` | `image`, `primitives`                      |
//! | `command`  | `lang` (bash/python), `code`   | `stdout`, `stderr`, `exit_code`            |
//! | `ocr`      |                                | `rows` [{text, id, bbox}], `width_threshold` |
//! | `shutdown` |                                |                                            |
//!
//! `image` is `{"width", "height", "png"}` with base64 PNG bytes; `points`
//! is a list of `[x, y]` pairs.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use super::{Capabilities, Command, CommandLang, CommandOutput, EnvError, Environment, Primitive};
use crate::actions::{parse_action, ActionKind, GroundedAction, Point, ScreenGeometry};
use crate::tools::OcrTable;
use crate::trajectory::Observation;

fn error_kind(e: &EnvError) -> &'static str {
    match e {
        EnvError::UnsupportedCapability(_) => "unsupported_capability",
        EnvError::PrimitiveFailure(_) => "primitive_failure",
        EnvError::NotDispatchable(_) => "not_dispatchable",
        EnvError::MissingCoordinates(_) => "missing_coordinates",
        EnvError::Rejected(_) => "rejected",
        EnvError::NoSuchTask(_) => "no_such_task",
        EnvError::ChannelLost(_) => "channel_lost",
        EnvError::Protocol(_) => "protocol",
    }
}

fn error_from_wire(v: &Value) -> EnvError {
    let kind = v["kind"].as_str().unwrap_or("protocol");
    let msg = v["message"].as_str().unwrap_or_default().to_string();
    let action_kind = || ActionKind::from_method(&msg).unwrap_or(ActionKind::Done);
    match kind {
        "unsupported_capability" => EnvError::UnsupportedCapability(msg),
        "primitive_failure" => EnvError::PrimitiveFailure(msg),
        "not_dispatchable" => EnvError::NotDispatchable(action_kind()),
        "missing_coordinates" => EnvError::MissingCoordinates(action_kind()),
        "rejected" => EnvError::Rejected(msg),
        "no_such_task" => EnvError::NoSuchTask(msg),
        "channel_lost" => EnvError::ChannelLost(msg),
        _ => EnvError::Protocol(msg),
    }
}

fn error_message(e: &EnvError) -> String {
    match e {
        EnvError::NotDispatchable(k) | EnvError::MissingCoordinates(k) => k.method_name().to_string(),
        EnvError::UnsupportedCapability(m)
        | EnvError::PrimitiveFailure(m)
        | EnvError::Rejected(m)
        | EnvError::NoSuchTask(m)
        | EnvError::ChannelLost(m)
        | EnvError::Protocol(m) => m.clone(),
    }
}

pub fn image_to_wire(obs: &Observation) -> Value {
    let (w, h) = obs.dimensions();
    json!({"width": w, "height": h, "png": B64.encode(obs.png().as_slice())})
}

pub fn image_from_wire(v: &Value) -> Result<Observation, EnvError> {
    let b64 = v["png"].as_str().ok_or_else(|| EnvError::Protocol("image without png".into()))?;
    let bytes = B64
        .decode(b64)
        .map_err(|e| EnvError::Protocol(format!("bad base64 image: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| EnvError::Protocol(format!("bad png: {e}")))?
        .to_rgb8();
    let (w, h) = (v["width"].as_u64(), v["height"].as_u64());
    if (w, h) != (Some(u64::from(img.width())), Some(u64::from(img.height()))) {
        return Err(EnvError::Protocol("declared image size does not match png".into()));
    }
    Ok(Observation::new(img, 0))
}

fn respond(env: &mut dyn Environment, req: &Value) -> Result<Value, EnvError> {
    let proto = |m: &str| EnvError::Protocol(m.to_string());
    match req["verb"].as_str() {
        Some("hello") => Ok(json!({
            "handle": env.handle_id(),
            "capabilities": env.capabilities(),
            "screen": env.screen(),
        })),
        Some("reset") => {
            let task = req["task_id"].as_str().unwrap_or_default();
            Ok(json!({"image": image_to_wire(&env.reset(task)?)}))
        }
        Some("observe") => Ok(json!({"image": image_to_wire(&env.observe()?)})),
        Some("execute") => {
            let text = req["action"].as_str().ok_or_else(|| proto("execute without action"))?;
            let action = parse_action(text).map_err(|e| EnvError::Protocol(e.to_string()))?;
            let mut points = Vec::new();
            for p in req["points"].as_array().map(Vec::as_slice).unwrap_or(&[]) {
                let xy = |i: usize| p[i].as_i64().and_then(|v| i32::try_from(v).ok());
                match (xy(0), xy(1)) {
                    (Some(x), Some(y)) => points.push(Point::new(x, y)),
                    _ => return Err(proto("points must be [x, y] integer pairs")),
                }
            }
            let obs = env.execute(&GroundedAction { action, points })?;
            Ok(json!({"image": image_to_wire(&obs), "primitives": env.last_primitives()}))
        }
        Some("command") => {
            let lang = match req["lang"].as_str() {
                Some("python") => CommandLang::Python,
                Some("bash") | None => CommandLang::Bash,
                Some(other) => return Err(EnvError::Protocol(format!("unknown command lang {other}"))),
            };
            let code = req["code"].as_str().ok_or_else(|| proto("command without code"))?;
            let out = env.command(&Command {
                lang,
                code: code.to_string(),
            })?;
            Ok(serde_json::to_value(out).expect("plain struct"))
        }
        Some("ocr") => Ok(serde_json::to_value(env.ocr()?).expect("plain struct")),
        Some(other) => Err(EnvError::Protocol(format!("unknown verb {other}"))),
        None => Err(proto("request without verb")),
    }
}

/// Serves one connection until EOF or `shutdown`. Returns true on shutdown.
pub fn serve_stream<R: BufRead, W: Write>(env: &mut dyn Environment, reader: R, mut writer: W) -> io::Result<bool> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, reply, stop) = match serde_json::from_str::<Value>(&line) {
            Err(e) => (Value::Null, Err(EnvError::Protocol(format!("bad json: {e}"))), false),
            Ok(req) => {
                let stop = req["verb"] == "shutdown";
                let r = if stop { Ok(json!({})) } else { respond(env, &req) };
                (req["id"].clone(), r, stop)
            }
        };
        let mut out = match reply {
            Ok(Value::Object(m)) => Value::Object(m),
            Ok(other) => json!({"value": other}),
            Err(e) => json!({"error": {"kind": error_kind(&e), "message": error_message(&e)}}),
        };
        let ok = out.get("error").is_none();
        out["id"] = id;
        out["ok"] = Value::Bool(ok);
        writeln!(writer, "{out}")?;
        writer.flush()?;
        if stop {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Accepts connections one at a time until a client sends `shutdown`.
pub fn serve_tcp(env: &mut dyn Environment, listener: &TcpListener) -> io::Result<()> {
    loop {
        let (stream, _) = listener.accept()?;
        let reader = BufReader::new(stream.try_clone()?);
        if serve_stream(env, reader, stream)? {
            return Ok(());
        }
    }
}

/// Client side of the wire.
pub struct WireEnvironment {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
    handle: String,
    caps: Capabilities,
    screen: ScreenGeometry,
    last_primitives: Option<Vec<Primitive>>,
}

impl WireEnvironment {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, EnvError> {
        let stream = TcpStream::connect(addr).map_err(|e| EnvError::ChannelLost(e.to_string()))?;
        let reader = BufReader::new(stream.try_clone().map_err(|e| EnvError::ChannelLost(e.to_string()))?);
        let mut env = WireEnvironment {
            reader,
            writer: stream,
            next_id: 0,
            handle: String::new(),
            caps: Capabilities::default(),
            screen: ScreenGeometry::default(),
            last_primitives: None,
        };
        let hello = env.call(json!({"verb": "hello"}))?;
        env.handle = hello["handle"].as_str().unwrap_or("wire").to_string();
        env.caps = serde_json::from_value(hello["capabilities"].clone())
            .map_err(|e| EnvError::Protocol(format!("bad capabilities: {e}")))?;
        env.screen = serde_json::from_value(hello["screen"].clone())
            .map_err(|e| EnvError::Protocol(format!("bad screen: {e}")))?;
        Ok(env)
    }

    fn call(&mut self, mut req: Value) -> Result<Value, EnvError> {
        self.next_id += 1;
        req["id"] = json!(self.next_id);
        let lost = |e: io::Error| EnvError::ChannelLost(e.to_string());
        writeln!(self.writer, "{req}").map_err(lost)?;
        self.writer.flush().map_err(lost)?;
        let mut line = String::new();
        if self.reader.read_line(&mut line).map_err(lost)? == 0 {
            return Err(EnvError::ChannelLost("connection closed".into()));
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| EnvError::Protocol(format!("bad reply: {e}")))?;
        if v["id"] != json!(self.next_id) {
            return Err(EnvError::Protocol(format!("reply id {} != request id {}", v["id"], self.next_id)));
        }
        if v["ok"] == Value::Bool(true) {
            Ok(v)
        } else {
            Err(error_from_wire(&v["error"]))
        }
    }

    pub fn shutdown(mut self) -> Result<(), EnvError> {
        self.call(json!({"verb": "shutdown"})).map(|_| ())
    }
}

impl Environment for WireEnvironment {
    fn handle_id(&self) -> String {
        self.handle.clone()
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn screen(&self) -> ScreenGeometry {
        self.screen
    }

    fn reset(&mut self, task_id: &str) -> Result<Observation, EnvError> {
        let v = self.call(json!({"verb": "reset", "task_id": task_id}))?;
        image_from_wire(&v["image"])
    }

    fn observe(&mut self) -> Result<Observation, EnvError> {
        let v = self.call(json!({"verb": "observe"}))?;
        image_from_wire(&v["image"])
    }

    fn execute(&mut self, ga: &GroundedAction) -> Result<Observation, EnvError> {
        let points: Vec<[i32; 2]> = ga.points.iter().map(|p| [p.x, p.y]).collect();
        let v = self.call(json!({"verb": "execute", "action": ga.action.to_string(), "points": points}))?;
        self.last_primitives = serde_json::from_value(v["primitives"].clone()).ok().flatten();
        image_from_wire(&v["image"])
    }

    fn command(&mut self, cmd: &Command) -> Result<CommandOutput, EnvError> {
        let v = self.call(json!({"verb": "command", "lang": cmd.lang.as_str(), "code": cmd.code}))?;
        Ok(CommandOutput {
            stdout: v["stdout"].as_str().unwrap_or_default().to_string(),
            stderr: v["stderr"].as_str().unwrap_or_default().to_string(),
            exit_code: v["exit_code"].as_i64().unwrap_or(-1) as i32,
        })
    }

    fn ocr(&mut self) -> Result<OcrTable, EnvError> {
        let v = self.call(json!({"verb": "ocr"}))?;
        serde_json::from_value(v).map_err(|e| EnvError::Protocol(format!("bad ocr table: {e}")))
    }

    fn last_primitives(&self) -> Option<Vec<Primitive>> {
        self.last_primitives.clone()
    }
}
