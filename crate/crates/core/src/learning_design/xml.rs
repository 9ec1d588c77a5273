use roxmltree::{Document, Node};

use super::{
    Act, Activity, ActivityKind, Completion, DeviceRequirement, Environment, Issue,
    ItemRequirement, Manifest, ManifestError, MaxPersons, Method, Play, ResourceRef, Role,
    RoleKind, RolePart, Structure, StructureMode, validate_manifest,
};
use crate::types::Range;
use crate::xmlw::XmlWriter;

type Result<T> = std::result::Result<T, ManifestError>;

struct Ctx {
    warnings: Vec<Issue>,
}

fn schema(path: &str, message: impl Into<String>) -> ManifestError {
    ManifestError::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

fn req_attr<'a>(node: Node<'a, '_>, path: &str, name: &str) -> Result<&'a str> {
    node.attribute(name)
        .ok_or_else(|| schema(path, format!("missing attribute `{name}`")))
}

fn parse_attr<T, F>(node: Node<'_, '_>, path: &str, name: &str, f: F) -> Result<Option<T>>
where
    F: FnOnce(&str) -> std::result::Result<T, String>,
{
    match node.attribute(name) {
        None => Ok(None),
        Some(v) => f(v)
            .map(Some)
            .map_err(|e| schema(path, format!("attribute `{name}`: {e}"))),
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true|false, got `{other}`")),
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| format!("`{s}`: {e}"))
}

fn parse_u32(s: &str) -> std::result::Result<u32, String> {
    s.trim().parse::<u32>().map_err(|e| format!("`{s}`: {e}"))
}

fn elements<'a, 'i>(node: Node<'a, 'i>) -> impl Iterator<Item = Node<'a, 'i>> {
    node.children().filter(|n| n.is_element())
}

fn name<'a>(node: Node<'a, '_>) -> &'a str {
    node.tag_name().name()
}

impl Ctx {
    fn unknown(&mut self, owner: &str, path: &str, node: Node<'_, '_>) {
        self.warnings.push(Issue::warning(
            "UNKNOWN_ELEMENT",
            owner,
            format!("ignored unknown element <{}> at {path}", name(node)),
        ));
    }
}

/// Parses manifest XML into a [`Manifest`]. Structural invariants are not
/// checked here; see [`validate_manifest`].
pub fn parse_manifest(xml_text: &str) -> Result<Manifest> {
    let doc = Document::parse(xml_text).map_err(|e| ManifestError::XmlSyntax(e.to_string()))?;
    let root = doc.root_element();
    if name(root) != "manifest" {
        return Err(schema(
            name(root),
            format!("root element must be <manifest>, found <{}>", name(root)),
        ));
    }
    let mut ctx = Ctx {
        warnings: Vec::new(),
    };
    let path = "manifest";
    let identifier = req_attr(root, path, "identifier")?.to_string();
    let title = root.attribute("title").unwrap_or_default().to_string();

    let mut m = Manifest::empty(&identifier, &title);
    let mut saw_method = false;
    for section in elements(root) {
        let spath = format!("{path}/{}", name(section));
        match name(section) {
            "roles" => m.roles = parse_roles(&mut ctx, section, &spath, &identifier)?,
            "activities" => m.activities = parse_activities(&mut ctx, section, &spath, &identifier)?,
            "environments" => {
                m.environments = parse_environments(&mut ctx, section, &spath, &identifier)?
            }
            "method" => {
                saw_method = true;
                m.method = parse_method(&mut ctx, section, &spath, &identifier)?;
            }
            "resources" => m.resources = parse_resources(&mut ctx, section, &spath, &identifier)?,
            _ => ctx.unknown(&identifier, &spath, section),
        }
    }
    if !saw_method {
        return Err(schema(path, "missing required element <method>"));
    }
    m.parse_warnings = ctx.warnings;
    Ok(m)
}

fn indexed(parent: &str, node: Node<'_, '_>, i: usize) -> String {
    format!("{parent}/{}[{}]", name(node), i + 1)
}

fn parse_roles(ctx: &mut Ctx, section: Node<'_, '_>, path: &str, owner: &str) -> Result<Vec<Role>> {
    let mut roles = Vec::new();
    for (i, n) in elements(section).enumerate() {
        let p = indexed(path, n, i);
        if name(n) != "role" {
            ctx.unknown(owner, &p, n);
            continue;
        }
        let id = req_attr(n, &p, "id")?.to_string();
        let kind = match req_attr(n, &p, "kind")? {
            "learner" => RoleKind::Learner,
            "staff" => RoleKind::Staff,
            other => return Err(schema(&p, format!("unknown role kind `{other}`"))),
        };
        let min_persons = parse_attr(n, &p, "min-persons", parse_u32)?.unwrap_or(0);
        let max_persons = parse_attr(n, &p, "max-persons", |s| {
            if s == "unbounded" {
                Ok(MaxPersons::Unbounded)
            } else {
                parse_u32(s).map(MaxPersons::Bounded)
            }
        })?
        .unwrap_or(MaxPersons::Unbounded);
        for extra in elements(n) {
            ctx.unknown(&id, &p, extra);
        }
        roles.push(Role {
            id,
            kind,
            min_persons,
            max_persons,
        });
    }
    Ok(roles)
}

fn parse_activities(
    ctx: &mut Ctx,
    section: Node<'_, '_>,
    path: &str,
    owner: &str,
) -> Result<Vec<Activity>> {
    let mut out = Vec::new();
    for (i, n) in elements(section).enumerate() {
        let p = indexed(path, n, i);
        if name(n) != "activity" {
            ctx.unknown(owner, &p, n);
            continue;
        }
        let id = req_attr(n, &p, "id")?.to_string();
        let kind = match req_attr(n, &p, "kind")? {
            "learning" => ActivityKind::Learning,
            "support" => ActivityKind::Support,
            "structure" => ActivityKind::Structure,
            other => return Err(schema(&p, format!("unknown activity kind `{other}`"))),
        };
        let completion = parse_attr(n, &p, "completion", |s| match s {
            "user-choice" => Ok(Completion::UserChoice),
            "auto-on-children" => Ok(Completion::AutoOnChildren),
            other => Err(format!("unknown completion `{other}`")),
        })?
        .unwrap_or(if kind == ActivityKind::Structure {
            Completion::AutoOnChildren
        } else {
            Completion::UserChoice
        });
        let initially_hidden = parse_attr(n, &p, "initially-hidden", parse_bool)?.unwrap_or(false);

        let mut environment_refs = Vec::new();
        let mut structure = None;
        for (j, c) in elements(n).enumerate() {
            let cp = indexed(&p, c, j);
            match name(c) {
                "environment-ref" => environment_refs.push(req_attr(c, &cp, "ref")?.to_string()),
                "structure" => {
                    let mode = match req_attr(c, &cp, "mode")? {
                        "sequence" => StructureMode::Sequence,
                        "selection" => StructureMode::Selection,
                        other => {
                            return Err(schema(&cp, format!("unknown structure mode `{other}`")));
                        }
                    };
                    let number_to_select = parse_attr(c, &cp, "number-to-select", parse_u32)?;
                    let mut children = Vec::new();
                    for (k, r) in elements(c).enumerate() {
                        let rp = indexed(&cp, r, k);
                        if name(r) == "activity-ref" {
                            children.push(req_attr(r, &rp, "ref")?.to_string());
                        } else {
                            ctx.unknown(&id, &rp, r);
                        }
                    }
                    structure = Some(Structure {
                        mode,
                        children,
                        number_to_select,
                    });
                }
                _ => ctx.unknown(&id, &cp, c),
            }
        }
        out.push(Activity {
            title: n.attribute("title").unwrap_or_default().to_string(),
            content_ref: n.attribute("content-ref").map(str::to_string),
            id,
            kind,
            environment_refs,
            completion,
            structure,
            initially_hidden,
        });
    }
    Ok(out)
}

fn parse_environments(
    ctx: &mut Ctx,
    section: Node<'_, '_>,
    path: &str,
    owner: &str,
) -> Result<Vec<Environment>> {
    let mut out = Vec::new();
    for (i, n) in elements(section).enumerate() {
        let p = indexed(path, n, i);
        if name(n) != "environment" {
            ctx.unknown(owner, &p, n);
            continue;
        }
        let id = req_attr(n, &p, "id")?.to_string();
        let mut env = Environment {
            id: id.clone(),
            learning_objects: Vec::new(),
            services: Vec::new(),
            device_requirements: Vec::new(),
        };
        for (j, c) in elements(n).enumerate() {
            let cp = indexed(&p, c, j);
            match name(c) {
                "learning-object" => env
                    .learning_objects
                    .push(req_attr(c, &cp, "ref")?.to_string()),
                "service" => env.services.push(req_attr(c, &cp, "ref")?.to_string()),
                "device-requirement" => {
                    let device_class = req_attr(c, &cp, "device-class")?.to_string();
                    let mut items = Vec::new();
                    for (k, it) in elements(c).enumerate() {
                        let ip = indexed(&cp, it, k);
                        if name(it) != "item" {
                            ctx.unknown(&id, &ip, it);
                            continue;
                        }
                        let lo = parse_attr(it, &ip, "lo", parse_f64)?;
                        let hi = parse_attr(it, &ip, "hi", parse_f64)?;
                        let range = match (lo, hi) {
                            (Some(lo), Some(hi)) => Some(Range::new(lo, hi)),
                            (None, None) => None,
                            _ => return Err(schema(&ip, "`lo` and `hi` must appear together")),
                        };
                        items.push(ItemRequirement {
                            path: req_attr(it, &ip, "path")?.to_string(),
                            data_type: req_attr(it, &ip, "data-type")?
                                .parse()
                                .map_err(|e: String| schema(&ip, e))?,
                            access: req_attr(it, &ip, "access")?
                                .parse()
                                .map_err(|e: String| schema(&ip, e))?,
                            range,
                        });
                    }
                    env.device_requirements.push(DeviceRequirement {
                        device_class,
                        items,
                    });
                }
                _ => ctx.unknown(&id, &cp, c),
            }
        }
        out.push(env);
    }
    Ok(out)
}

fn parse_method(ctx: &mut Ctx, section: Node<'_, '_>, path: &str, owner: &str) -> Result<Method> {
    let mut plays = Vec::new();
    for (i, pn) in elements(section).enumerate() {
        let pp = indexed(path, pn, i);
        if name(pn) != "play" {
            ctx.unknown(owner, &pp, pn);
            continue;
        }
        let play_id = req_attr(pn, &pp, "id")?.to_string();
        let mut acts = Vec::new();
        for (j, an) in elements(pn).enumerate() {
            let ap = indexed(&pp, an, j);
            if name(an) != "act" {
                ctx.unknown(&play_id, &ap, an);
                continue;
            }
            let act_id = req_attr(an, &ap, "id")?.to_string();
            let mut role_parts = Vec::new();
            for (k, rn) in elements(an).enumerate() {
                let rp = indexed(&ap, rn, k);
                if name(rn) != "role-part" {
                    ctx.unknown(&act_id, &rp, rn);
                    continue;
                }
                role_parts.push(RolePart {
                    id: req_attr(rn, &rp, "id")?.to_string(),
                    role_ref: req_attr(rn, &rp, "role-ref")?.to_string(),
                    activity_ref: req_attr(rn, &rp, "activity-ref")?.to_string(),
                });
            }
            acts.push(Act {
                id: act_id,
                role_parts,
            });
        }
        plays.push(Play { id: play_id, acts });
    }
    Ok(Method { plays })
}

fn parse_resources(
    ctx: &mut Ctx,
    section: Node<'_, '_>,
    path: &str,
    owner: &str,
) -> Result<Vec<ResourceRef>> {
    let mut out = Vec::new();
    for (i, n) in elements(section).enumerate() {
        let p = indexed(path, n, i);
        if name(n) != "resource" {
            ctx.unknown(owner, &p, n);
            continue;
        }
        out.push(ResourceRef {
            id: req_attr(n, &p, "id")?.to_string(),
            href: req_attr(n, &p, "href")?.to_string(),
            media_type: n.attribute("type").map(str::to_string),
        });
    }
    Ok(out)
}

/// Writes the canonical XML form: sections in fixed order, children in
/// declaration order, attributes sorted by name.
pub fn serialize_manifest(m: &Manifest) -> Result<String> {
    let report = validate_manifest(m);
    if !report.ok {
        return Err(ManifestError::InvalidManifest(report));
    }

    let mut w = XmlWriter::new();
    w.declaration();
    w.open("manifest", &[("identifier", &m.identifier), ("title", &m.title)]);

    w.open("roles", &[]);
    for r in &m.roles {
        let kind = match r.kind {
            RoleKind::Learner => "learner",
            RoleKind::Staff => "staff",
        };
        let max = match r.max_persons {
            MaxPersons::Bounded(n) => n.to_string(),
            MaxPersons::Unbounded => "unbounded".to_string(),
        };
        w.empty(
            "role",
            &[
                ("id", &r.id),
                ("kind", kind),
                ("max-persons", &max),
                ("min-persons", &r.min_persons.to_string()),
            ],
        );
    }
    w.close("roles");

    w.open("activities", &[]);
    for a in &m.activities {
        let kind = match a.kind {
            ActivityKind::Learning => "learning",
            ActivityKind::Support => "support",
            ActivityKind::Structure => "structure",
        };
        let completion = match a.completion {
            Completion::UserChoice => "user-choice",
            Completion::AutoOnChildren => "auto-on-children",
        };
        let mut attrs: Vec<(&str, &str)> = vec![("completion", completion)];
        if let Some(c) = &a.content_ref {
            attrs.push(("content-ref", c));
        }
        attrs.push(("id", &a.id));
        if a.initially_hidden {
            attrs.push(("initially-hidden", "true"));
        }
        attrs.push(("kind", kind));
        attrs.push(("title", &a.title));

        if a.environment_refs.is_empty() && a.structure.is_none() {
            w.empty("activity", &attrs);
            continue;
        }
        w.open("activity", &attrs);
        for e in &a.environment_refs {
            w.empty("environment-ref", &[("ref", e)]);
        }
        if let Some(s) = &a.structure {
            let mode = match s.mode {
                StructureMode::Sequence => "sequence",
                StructureMode::Selection => "selection",
            };
            let n = s.number_to_select.map(|n| n.to_string());
            let mut sattrs: Vec<(&str, &str)> = vec![("mode", mode)];
            if let Some(n) = &n {
                sattrs.push(("number-to-select", n));
            }
            w.open("structure", &sattrs);
            for c in &s.children {
                w.empty("activity-ref", &[("ref", c)]);
            }
            w.close("structure");
        }
        w.close("activity");
    }
    w.close("activities");

    w.open("environments", &[]);
    for e in &m.environments {
        w.open("environment", &[("id", &e.id)]);
        for lo in &e.learning_objects {
            w.empty("learning-object", &[("ref", lo)]);
        }
        for s in &e.services {
            w.empty("service", &[("ref", s)]);
        }
        for req in &e.device_requirements {
            w.open("device-requirement", &[("device-class", &req.device_class)]);
            for it in &req.items {
                let lo = it.range.map(|r| r.lo.to_string());
                let hi = it.range.map(|r| r.hi.to_string());
                let mut attrs: Vec<(&str, &str)> = vec![
                    ("access", it.access.as_str()),
                    ("data-type", it.data_type.as_str()),
                ];
                if let Some(hi) = &hi {
                    attrs.push(("hi", hi));
                }
                if let Some(lo) = &lo {
                    attrs.push(("lo", lo));
                }
                attrs.push(("path", &it.path));
                w.empty("item", &attrs);
            }
            w.close("device-requirement");
        }
        w.close("environment");
    }
    w.close("environments");

    w.open("method", &[]);
    for p in &m.method.plays {
        w.open("play", &[("id", &p.id)]);
        for act in &p.acts {
            w.open("act", &[("id", &act.id)]);
            for rp in &act.role_parts {
                w.empty(
                    "role-part",
                    &[
                        ("activity-ref", &rp.activity_ref),
                        ("id", &rp.id),
                        ("role-ref", &rp.role_ref),
                    ],
                );
            }
            w.close("act");
        }
        w.close("play");
    }
    w.close("method");

    w.open("resources", &[]);
    for r in &m.resources {
        let mut attrs: Vec<(&str, &str)> = vec![("href", &r.href), ("id", &r.id)];
        if let Some(t) = &r.media_type {
            attrs.push(("type", t));
        }
        w.empty("resource", &attrs);
    }
    w.close("resources");

    w.close("manifest");
    Ok(w.finish())
}
