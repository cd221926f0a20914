use super::ProvEntity;

const HEADER: &str = r#"#!/bin/sh
# Bulk download of data products matching a provenance query.
# Each entry: fetch URL SHA256 DESTINATION
set -eu
fetch() {
    mkdir -p "$(dirname "$3")"
    if command -v curl >/dev/null 2>&1; then
        curl -fsSL -H "Authorization: Bearer ${SEISFLOW_TOKEN:-}" "$1" -o "$3"
    else
        wget -q --header="Authorization: Bearer ${SEISFLOW_TOKEN:-}" -O "$3" "$1"
    fi
    got=$( (sha256sum "$3" 2>/dev/null || shasum -a 256 "$3") | cut -d' ' -f1)
    [ "$got" = "$2" ] || { echo "digest mismatch for $3" >&2; exit 1; }
}
"#;

fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Destination file for an entity, relative to the script's working directory.
pub fn destination(entity: &ProvEntity) -> String {
    let stem: String =
        entity.entity_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect();
    format!("data/{stem}.bin")
}

/// A POSIX shell script fetching each entity's payload blob from `base_url`.
pub fn download_script(entities: &[ProvEntity], base_url: &str) -> String {
    let base = base_url.trim_end_matches('/');
    let mut s = String::from(HEADER);
    for e in entities {
        let url = format!("{base}/blobs/{}", e.payload_digest);
        s.push_str(&format!("fetch {} {} {}\n", quote(&url), quote(&e.payload_digest), quote(&destination(e))));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: &str) -> ProvEntity {
        ProvEntity {
            entity_id: id.into(),
            payload_digest: "ab".repeat(32),
            metadata: Default::default(),
            generated_by: "a".into(),
            at_time: 0.0,
        }
    }

    #[test]
    fn one_line_per_entity() {
        let s = download_script(&[ent("r/x/o/0"), ent("r/x/o/1"), ent("it's")], "http://h:1/");
        assert_eq!(s.lines().filter(|l| l.starts_with("fetch '")).count(), 3);
        assert!(s.contains("'http://h:1/blobs/abab"));
        assert!(s.contains(r"'data/it_s.bin'"));
        assert_eq!(download_script(&[], "http://h"), HEADER);
    }
}
