use std::str::FromStr;

use roxmltree::{Document, Node};

use super::{
    DaRequest, DaResponse, FaultCode, Operation, RequestBody, ResponseBody, SubscribeItem,
};
use crate::clock::Timestamp;
use crate::device::{BrowseEntry, Item, ItemValue, Quality, WriteRejection, WriteRequest, WriteResult};
use crate::types::{Access, DataType, Range, Value};
use crate::xmlw::XmlWriter;

pub const REQUEST_ROOT: &str = "DaRequest";
pub const RESPONSE_ROOT: &str = "DaResponse";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{}: {message}", code.as_str())]
pub struct DecodeError {
    pub code: FaultCode,
    pub message: String,
    /// Client handle recovered from the root element, if it got that far.
    pub client_handle: Option<String>,
}

fn num(x: f64) -> String {
    x.to_string()
}

fn quality_str(q: Quality) -> &'static str {
    match q {
        Quality::Good => "GOOD",
        Quality::Uncertain => "UNCERTAIN",
        Quality::Bad => "BAD",
    }
}

fn parse_quality(s: &str) -> Option<Quality> {
    Some(match s {
        "GOOD" => Quality::Good,
        "UNCERTAIN" => Quality::Uncertain,
        "BAD" => Quality::Bad,
        _ => return None,
    })
}

/// Attribute list that is always written in name order.
#[derive(Default)]
struct Attrs(Vec<(&'static str, String)>);

impl Attrs {
    fn set(&mut self, k: &'static str, v: impl Into<String>) -> &mut Self {
        self.0.push((k, v.into()));
        self
    }

    fn opt(&mut self, k: &'static str, v: Option<&str>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((k, v.to_string()));
        }
        self
    }

    fn sorted(&self) -> Vec<(&str, &str)> {
        let mut v: Vec<(&str, &str)> = self.0.iter().map(|(k, v)| (*k, v.as_str())).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }
}

fn write_el(w: &mut XmlWriter, name: &str, attrs: &Attrs, text: Option<&str>) {
    let a = attrs.sorted();
    match text {
        Some(t) => w.text(name, &a, t),
        None => w.empty(name, &a),
    }
}

fn write_root(w: &mut XmlWriter, name: &str, attrs: &Attrs, children: impl FnOnce(&mut XmlWriter), has_children: bool) {
    let a = attrs.sorted();
    if has_children {
        w.open(name, &a);
        children(w);
        w.close(name);
    } else {
        w.empty(name, &a);
    }
}

pub fn encode_request(req: &DaRequest) -> String {
    let mut root = Attrs::default();
    root.opt("clientHandle", req.client_handle.as_deref())
        .set("op", req.body.operation().as_str());
    let mut w = XmlWriter::compact();
    match &req.body {
        RequestBody::GetStatus => write_root(&mut w, REQUEST_ROOT, &root, |_| {}, false),
        RequestBody::Browse { device, path } => {
            root.set("device", device.as_str()).set("path", path.as_str());
            write_root(&mut w, REQUEST_ROOT, &root, |_| {}, false)
        }
        RequestBody::Read { device, paths } => {
            root.set("device", device.as_str());
            write_root(
                &mut w,
                REQUEST_ROOT,
                &root,
                |w| {
                    for p in paths {
                        let mut a = Attrs::default();
                        a.set("path", p.as_str());
                        write_el(w, "Item", &a, None);
                    }
                },
                !paths.is_empty(),
            )
        }
        RequestBody::Write { device, writes } => {
            root.set("device", device.as_str());
            write_root(
                &mut w,
                REQUEST_ROOT,
                &root,
                |w| {
                    for wr in writes {
                        let mut a = Attrs::default();
                        a.set("path", wr.path.as_str())
                            .set("type", wr.value.data_type().as_str());
                        write_el(w, "Item", &a, Some(&wr.value.to_text()));
                    }
                },
                !writes.is_empty(),
            )
        }
        RequestBody::Subscribe { device, items, ttl } => {
            root.set("device", device.as_str());
            if let Some(t) = ttl {
                root.set("ttl", num(*t));
            }
            write_root(
                &mut w,
                REQUEST_ROOT,
                &root,
                |w| {
                    for it in items {
                        let mut a = Attrs::default();
                        a.set("deadband", num(it.deadband)).set("path", it.path.as_str());
                        write_el(w, "Item", &a, None);
                    }
                },
                !items.is_empty(),
            )
        }
        RequestBody::SubscriptionPolledRefresh { handle } | RequestBody::SubscriptionCancel { handle } => {
            root.set("handle", handle.as_str());
            write_root(&mut w, REQUEST_ROOT, &root, |_| {}, false)
        }
    }
    w.finish()
}

fn write_item_value(w: &mut XmlWriter, iv: &ItemValue) {
    let mut a = Attrs::default();
    a.set("path", iv.path.as_str())
        .set("quality", quality_str(iv.quality))
        .set("timestamp", num(iv.timestamp.0));
    match &iv.value {
        Some(v) => {
            a.set("type", v.data_type().as_str());
            write_el(w, "ItemValue", &a, Some(&v.to_text()));
        }
        None => write_el(w, "ItemValue", &a, None),
    }
}

fn write_browse_entry(w: &mut XmlWriter, e: &BrowseEntry) {
    let mut a = Attrs::default();
    match e {
        BrowseEntry::Branch { path } => {
            a.set("path", path.as_str());
            write_el(w, "Branch", &a, None);
        }
        BrowseEntry::Item(it) => {
            a.set("access", it.access.as_str())
                .set("dataType", it.data_type.as_str())
                .set("path", it.path.as_str())
                .set("state", if it.state { "true" } else { "false" })
                .set("unit", it.engineering_unit.as_str());
            if let Some(r) = &it.range {
                a.set("hi", num(r.hi)).set("lo", num(r.lo));
            }
            write_el(w, "Item", &a, None);
        }
    }
}

pub fn encode_response(resp: &DaResponse) -> String {
    let mut root = Attrs::default();
    root.opt("clientHandle", resp.client_handle.as_deref())
        .set("op", resp.body.op_name())
        .set("replyTime", num(resp.reply_time.0));
    let mut w = XmlWriter::compact();
    match &resp.body {
        ResponseBody::Status {
            start_time,
            device_count,
        } => write_root(
            &mut w,
            RESPONSE_ROOT,
            &root,
            |w| {
                let mut a = Attrs::default();
                a.set("deviceCount", device_count.to_string())
                    .set("serverState", "RUNNING")
                    .set("startTime", num(start_time.0));
                write_el(w, "Status", &a, None);
            },
            true,
        ),
        ResponseBody::Browse { elements } => write_root(
            &mut w,
            RESPONSE_ROOT,
            &root,
            |w| elements.iter().for_each(|e| write_browse_entry(w, e)),
            !elements.is_empty(),
        ),
        ResponseBody::Read { items } => write_root(
            &mut w,
            RESPONSE_ROOT,
            &root,
            |w| items.iter().for_each(|iv| write_item_value(w, iv)),
            !items.is_empty(),
        ),
        ResponseBody::Write { results } => write_root(
            &mut w,
            RESPONSE_ROOT,
            &root,
            |w| {
                for r in results {
                    let mut a = Attrs::default();
                    a.set("accepted", if r.accepted { "true" } else { "false" })
                        .set("path", r.path.as_str())
                        .opt("reason", r.reason.map(WriteRejection::as_str));
                    write_el(w, "WriteResult", &a, None);
                }
            },
            !results.is_empty(),
        ),
        ResponseBody::Subscribe { handle, items } | ResponseBody::Refresh { handle, items } => {
            root.set("handle", handle.as_str());
            write_root(
                &mut w,
                RESPONSE_ROOT,
                &root,
                |w| items.iter().for_each(|iv| write_item_value(w, iv)),
                !items.is_empty(),
            )
        }
        ResponseBody::Cancel { handle } => {
            root.set("handle", handle.as_str());
            write_root(&mut w, RESPONSE_ROOT, &root, |_| {}, false)
        }
        ResponseBody::Fault { code, message } => write_root(
            &mut w,
            RESPONSE_ROOT,
            &root,
            |w| {
                let mut a = Attrs::default();
                a.set("code", code.as_str()).set("message", message.as_str());
                write_el(w, "Fault", &a, None);
            },
            true,
        ),
    }
    w.finish()
}

struct Ctx {
    client_handle: Option<String>,
}

impl Ctx {
    fn err(&self, code: FaultCode, message: impl Into<String>) -> DecodeError {
        DecodeError {
            code,
            message: message.into(),
            client_handle: self.client_handle.clone(),
        }
    }

    fn malformed(&self, message: impl Into<String>) -> DecodeError {
        self.err(FaultCode::Malformed, message)
    }

    fn attr<'a>(&self, n: Node<'a, '_>, name: &str) -> Result<&'a str, DecodeError> {
        n.attribute(name).ok_or_else(|| {
            self.malformed(format!("<{}> is missing attribute `{name}`", n.tag_name().name()))
        })
    }

    fn parse<T: FromStr>(&self, n: Node<'_, '_>, name: &str, raw: &str) -> Result<T, DecodeError> {
        raw.parse::<T>().map_err(|_| {
            self.malformed(format!(
                "<{}> attribute `{name}` has invalid value `{raw}`",
                n.tag_name().name()
            ))
        })
    }

    fn num_attr(&self, n: Node<'_, '_>, name: &str) -> Result<Option<f64>, DecodeError> {
        match n.attribute(name) {
            None => Ok(None),
            Some(raw) => {
                let x: f64 = self.parse(n, name, raw)?;
                if !x.is_finite() {
                    return Err(self.malformed(format!("attribute `{name}` must be finite")));
                }
                Ok(Some(x))
            }
        }
    }

    fn bool_attr(&self, n: Node<'_, '_>, name: &str) -> Result<bool, DecodeError> {
        match self.attr(n, name)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(self.malformed(format!("attribute `{name}` must be a boolean, got `{other}`"))),
        }
    }

    /// Element children named `name`; anything else that is not blank text is rejected.
    fn children<'a, 'i>(&self, n: Node<'a, 'i>, allowed: &[&str]) -> Result<Vec<Node<'a, 'i>>, DecodeError> {
        let mut out = Vec::new();
        for c in n.children() {
            if c.is_element() {
                let name = c.tag_name().name();
                if !allowed.contains(&name) {
                    return Err(self.malformed(format!(
                        "unexpected element <{name}> inside <{}>",
                        n.tag_name().name()
                    )));
                }
                out.push(c);
            } else if c.is_text() {
                if !c.text().unwrap_or("").trim().is_empty() {
                    return Err(self.malformed(format!("unexpected text inside <{}>", n.tag_name().name())));
                }
            }
        }
        Ok(out)
    }

    fn no_children(&self, n: Node<'_, '_>) -> Result<(), DecodeError> {
        self.children(n, &[]).map(|_| ())
    }

    fn text_of(&self, n: Node<'_, '_>) -> Result<String, DecodeError> {
        let mut s = String::new();
        for c in n.children() {
            if c.is_element() {
                return Err(self.malformed(format!("<{}> must contain only text", n.tag_name().name())));
            }
            if let Some(t) = c.text() {
                s.push_str(t);
            }
        }
        Ok(s)
    }

    fn typed_value(&self, n: Node<'_, '_>) -> Result<Value, DecodeError> {
        let raw = self.attr(n, "type")?;
        let ty: DataType = self.parse(n, "type", raw)?;
        let text = self.text_of(n)?;
        Value::parse(ty, &text).map_err(|e| self.malformed(e))
    }
}

fn parse_doc<'i>(bytes: &'i [u8], root_name: &str) -> Result<Document<'i>, DecodeError> {
    let ctx = Ctx { client_handle: None };
    let text = std::str::from_utf8(bytes).map_err(|_| ctx.malformed("body is not valid UTF-8"))?;
    let doc = Document::parse(text).map_err(|e| ctx.malformed(format!("XML syntax error: {e}")))?;
    let root = doc.root_element();
    if root.tag_name().name() != root_name || root.tag_name().namespace().is_some() {
        return Err(ctx.malformed(format!(
            "expected root <{root_name}>, found <{}>",
            root.tag_name().name()
        )));
    }
    Ok(doc)
}

pub fn decode_request(bytes: &[u8]) -> Result<DaRequest, DecodeError> {
    let doc = parse_doc(bytes, REQUEST_ROOT)?;
    let root = doc.root_element();
    let ctx = Ctx {
        client_handle: root.attribute("clientHandle").map(str::to_string),
    };
    let op_raw = ctx.attr(root, "op")?;
    let op = Operation::parse(op_raw)
        .ok_or_else(|| ctx.err(FaultCode::UnknownOp, format!("unknown operation `{op_raw}`")))?;
    let device = || ctx.attr(root, "device").map(str::to_string);
    let body = match op {
        Operation::GetStatus => {
            ctx.no_children(root)?;
            RequestBody::GetStatus
        }
        Operation::Browse => {
            ctx.no_children(root)?;
            RequestBody::Browse {
                device: device()?,
                path: root.attribute("path").unwrap_or("").to_string(),
            }
        }
        Operation::Read => {
            let device = device()?;
            let paths = ctx
                .children(root, &["Item"])?
                .into_iter()
                .map(|c| {
                    ctx.no_children(c)?;
                    ctx.attr(c, "path").map(str::to_string)
                })
                .collect::<Result<_, _>>()?;
            RequestBody::Read { device, paths }
        }
        Operation::Write => {
            let device = device()?;
            let writes = ctx
                .children(root, &["Item"])?
                .into_iter()
                .map(|c| {
                    Ok(WriteRequest {
                        path: ctx.attr(c, "path")?.to_string(),
                        value: ctx.typed_value(c)?,
                    })
                })
                .collect::<Result<_, DecodeError>>()?;
            RequestBody::Write { device, writes }
        }
        Operation::Subscribe => {
            let device = device()?;
            let ttl = ctx.num_attr(root, "ttl")?;
            if ttl.is_some_and(|t| t <= 0.0) {
                return Err(ctx.malformed("ttl must be positive"));
            }
            let items = ctx
                .children(root, &["Item"])?
                .into_iter()
                .map(|c| {
                    ctx.no_children(c)?;
                    let deadband = ctx.num_attr(c, "deadband")?.unwrap_or(0.0);
                    if deadband < 0.0 {
                        return Err(ctx.malformed("deadband must not be negative"));
                    }
                    Ok(SubscribeItem {
                        path: ctx.attr(c, "path")?.to_string(),
                        deadband,
                    })
                })
                .collect::<Result<_, DecodeError>>()?;
            RequestBody::Subscribe { device, items, ttl }
        }
        Operation::SubscriptionPolledRefresh | Operation::SubscriptionCancel => {
            ctx.no_children(root)?;
            let handle = ctx.attr(root, "handle")?.to_string();
            if op == Operation::SubscriptionCancel {
                RequestBody::SubscriptionCancel { handle }
            } else {
                RequestBody::SubscriptionPolledRefresh { handle }
            }
        }
    };
    Ok(DaRequest {
        client_handle: ctx.client_handle,
        body,
    })
}

fn decode_item_value(ctx: &Ctx, n: Node<'_, '_>) -> Result<ItemValue, DecodeError> {
    let q = ctx.attr(n, "quality")?;
    let quality = parse_quality(q).ok_or_else(|| ctx.malformed(format!("unknown quality `{q}`")))?;
    let value = if n.attribute("type").is_some() {
        Some(ctx.typed_value(n)?)
    } else {
        ctx.no_children(n)?;
        None
    };
    Ok(ItemValue {
        path: ctx.attr(n, "path")?.to_string(),
        value,
        quality,
        timestamp: Timestamp(ctx.num_attr(n, "timestamp")?.unwrap_or(0.0)),
    })
}

fn decode_browse_entry(ctx: &Ctx, n: Node<'_, '_>) -> Result<BrowseEntry, DecodeError> {
    ctx.no_children(n)?;
    let path = ctx.attr(n, "path")?.to_string();
    if n.tag_name().name() == "Branch" {
        return Ok(BrowseEntry::Branch { path });
    }
    let access: Access = ctx.parse(n, "access", ctx.attr(n, "access")?)?;
    let data_type: DataType = ctx.parse(n, "dataType", ctx.attr(n, "dataType")?)?;
    let range = match (ctx.num_attr(n, "lo")?, ctx.num_attr(n, "hi")?) {
        (Some(lo), Some(hi)) => Some(Range::new(lo, hi)),
        (None, None) => None,
        _ => return Err(ctx.malformed("lo and hi must appear together")),
    };
    Ok(BrowseEntry::Item(Item {
        path,
        data_type,
        access,
        engineering_unit: n.attribute("unit").unwrap_or("").to_string(),
        range,
        state: ctx.bool_attr(n, "state")?,
    }))
}

pub fn decode_response(bytes: &[u8]) -> Result<DaResponse, DecodeError> {
    let doc = parse_doc(bytes, RESPONSE_ROOT)?;
    let root = doc.root_element();
    let ctx = Ctx {
        client_handle: root.attribute("clientHandle").map(str::to_string),
    };
    let reply_time = Timestamp(
        ctx.num_attr(root, "replyTime")?
            .ok_or_else(|| ctx.malformed("<DaResponse> is missing attribute `replyTime`"))?,
    );
    let op = ctx.attr(root, "op")?;
    let handle = || ctx.attr(root, "handle").map(str::to_string);
    let body = match op {
        "Fault" => {
            let kids = ctx.children(root, &["Fault"])?;
            let [f] = kids.as_slice() else {
                return Err(ctx.malformed("Fault response needs exactly one <Fault>"));
            };
            ctx.no_children(*f)?;
            let raw = ctx.attr(*f, "code")?;
            ResponseBody::Fault {
                code: FaultCode::parse(raw)
                    .ok_or_else(|| ctx.malformed(format!("unknown fault code `{raw}`")))?,
                message: f.attribute("message").unwrap_or("").to_string(),
            }
        }
        "GetStatus" => {
            let kids = ctx.children(root, &["Status"])?;
            let [s] = kids.as_slice() else {
                return Err(ctx.malformed("GetStatus response needs exactly one <Status>"));
            };
            ctx.no_children(*s)?;
            ResponseBody::Status {
                start_time: Timestamp(ctx.num_attr(*s, "startTime")?.unwrap_or(0.0)),
                device_count: ctx.parse(*s, "deviceCount", ctx.attr(*s, "deviceCount")?)?,
            }
        }
        "Browse" => ResponseBody::Browse {
            elements: ctx
                .children(root, &["Branch", "Item"])?
                .into_iter()
                .map(|c| decode_browse_entry(&ctx, c))
                .collect::<Result<_, _>>()?,
        },
        "Read" | "Subscribe" | "SubscriptionPolledRefresh" => {
            let items = ctx
                .children(root, &["ItemValue"])?
                .into_iter()
                .map(|c| decode_item_value(&ctx, c))
                .collect::<Result<_, _>>()?;
            match op {
                "Read" => ResponseBody::Read { items },
                "Subscribe" => ResponseBody::Subscribe {
                    handle: handle()?,
                    items,
                },
                _ => ResponseBody::Refresh {
                    handle: handle()?,
                    items,
                },
            }
        }
        "Write" => ResponseBody::Write {
            results: ctx
                .children(root, &["WriteResult"])?
                .into_iter()
                .map(|c| {
                    ctx.no_children(c)?;
                    let reason = match c.attribute("reason") {
                        None => None,
                        Some(r) => Some(
                            WriteRejection::parse(r)
                                .ok_or_else(|| ctx.malformed(format!("unknown write rejection `{r}`")))?,
                        ),
                    };
                    Ok(WriteResult {
                        path: ctx.attr(c, "path")?.to_string(),
                        accepted: ctx.bool_attr(c, "accepted")?,
                        reason,
                    })
                })
                .collect::<Result<_, DecodeError>>()?,
        },
        "SubscriptionCancel" => {
            ctx.no_children(root)?;
            ResponseBody::Cancel { handle: handle()? }
        }
        other => return Err(ctx.err(FaultCode::UnknownOp, format!("unknown operation `{other}`"))),
    };
    Ok(DaResponse {
        client_handle: ctx.client_handle,
        reply_time,
        body,
    })
}
