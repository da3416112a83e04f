//! Pascal VOC subset as written by LabelImg.
//!
//! VOC boxes are 1-based and inclusive; they are stored here 0-based and
//! half-open: `x0 = xmin - 1, y0 = ymin - 1, x1 = xmax, y1 = ymax`.

use roxmltree::{Document, Node};

use crate::error::VocError;

use super::frame::BoundingBox;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedObject {
    pub label: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub image_filename: String,
    pub image_width: u32,
    pub image_height: u32,
    pub objects: Vec<AnnotatedObject>,
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Result<Node<'a, 'i>, VocError> {
    node.children()
        .find(|c| c.has_tag_name(name))
        .ok_or_else(|| VocError::new(name, format!("missing inside <{}>", node.tag_name().name())))
}

fn text<'a>(node: Node<'a, '_>, name: &str) -> Result<&'a str, VocError> {
    Ok(child(node, name)?.text().unwrap_or("").trim())
}

fn number(node: Node<'_, '_>, name: &str) -> Result<u32, VocError> {
    let raw = text(node, name)?;
    if let Ok(v) = raw.parse::<u32>() {
        return Ok(v);
    }
    // Some tools write integral coordinates as "12.0".
    match raw.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) => Ok(v as u32),
        _ => Err(VocError::new(
            name,
            format!("expected a non-negative integer, got {raw:?}"),
        )),
    }
}

pub fn parse_voc(xml: &str) -> Result<AnnotationRecord, VocError> {
    let doc = Document::parse(xml).map_err(|e| VocError::new("xml", e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(VocError::new(
            "annotation",
            format!("root element is <{}>", root.tag_name().name()),
        ));
    }
    let image_filename = text(root, "filename")?.to_string();
    if image_filename.is_empty() {
        return Err(VocError::new("filename", "empty"));
    }
    let size = child(root, "size")?;
    let image_width = number(size, "width")?;
    let image_height = number(size, "height")?;
    if image_width == 0 || image_height == 0 {
        return Err(VocError::new("size", "image dimensions must be positive"));
    }

    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let label = text(obj, "name")?.to_string();
        if label.is_empty() {
            return Err(VocError::new("name", "empty object label"));
        }
        let bb = child(obj, "bndbox")?;
        let (xmin, ymin) = (number(bb, "xmin")?, number(bb, "ymin")?);
        let (xmax, ymax) = (number(bb, "xmax")?, number(bb, "ymax")?);
        if xmin < 1 || ymin < 1 {
            return Err(VocError::new("bndbox", "VOC coordinates start at 1"));
        }
        let bbox = BoundingBox::new(xmin - 1, ymin - 1, xmax, ymax);
        if bbox.check_within(image_width, image_height).is_err() {
            return Err(VocError::new(
                "bndbox",
                format!("box ({xmin},{ymin})-({xmax},{ymax}) invalid within {image_width}x{image_height}"),
            ));
        }
        objects.push(AnnotatedObject { label, bbox });
    }
    Ok(AnnotationRecord {
        image_filename,
        image_width,
        image_height,
        objects,
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Serializes a record in the same layout LabelImg produces.
pub fn to_voc_xml(record: &AnnotationRecord) -> String {
    let mut xml = String::from("<annotation>\n");
    xml.push_str("\t<folder>frames</folder>\n");
    xml.push_str(&format!("\t<filename>{}</filename>\n", escape(&record.image_filename)));
    xml.push_str(&format!(
        "\t<size>\n\t\t<width>{}</width>\n\t\t<height>{}</height>\n\t\t<depth>1</depth>\n\t</size>\n",
        record.image_width, record.image_height
    ));
    for obj in &record.objects {
        let b = obj.bbox;
        xml.push_str(&format!(
            "\t<object>\n\t\t<name>{}</name>\n\t\t<pose>Unspecified</pose>\n\t\t<truncated>0</truncated>\n\t\t<difficult>0</difficult>\n\t\t<bndbox>\n\t\t\t<xmin>{}</xmin>\n\t\t\t<ymin>{}</ymin>\n\t\t\t<xmax>{}</xmax>\n\t\t\t<ymax>{}</ymax>\n\t\t</bndbox>\n\t</object>\n",
            escape(&obj.label),
            b.x0 + 1,
            b.y0 + 1,
            b.x1,
            b.y1
        ));
    }
    xml.push_str("</annotation>\n");
    xml
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(objects: &str) -> String {
        format!(
            "<annotation><filename>f.pgm</filename><size><width>8</width><height>8</height><depth>1</depth></size>{objects}</annotation>"
        )
    }

    fn object(name: &str, b: [u32; 4]) -> String {
        format!(
            "<object><name>{name}</name><bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox></object>",
            b[0], b[1], b[2], b[3]
        )
    }

    #[test]
    fn converts_voc_coordinates() {
        let r = parse_voc(&doc(&object("person", [2, 2, 5, 5]))).unwrap();
        assert_eq!(r.image_filename, "f.pgm");
        assert_eq!((r.image_width, r.image_height), (8, 8));
        assert_eq!(r.objects[0].bbox, BoundingBox::new(1, 1, 5, 5));
        assert_eq!(r.objects[0].label, "person");
    }

    #[test]
    fn no_objects_is_fine() {
        assert!(parse_voc(&doc("")).unwrap().objects.is_empty());
    }

    #[test]
    fn out_of_bounds_box_cites_bndbox() {
        let err = parse_voc(&doc(&object("car", [1, 1, 9, 4]))).unwrap_err();
        assert_eq!(err.element, "bndbox");
    }

    #[test]
    fn zero_coordinate_is_rejected() {
        assert_eq!(
            parse_voc(&doc(&object("car", [0, 1, 3, 4]))).unwrap_err().element,
            "bndbox"
        );
    }

    #[test]
    fn missing_elements_are_named() {
        let err = parse_voc("<annotation><size><width>8</width><height>8</height></size></annotation>").unwrap_err();
        assert_eq!(err.element, "filename");
        let err = parse_voc(&doc("<object><name>x</name></object>")).unwrap_err();
        assert_eq!(err.element, "bndbox");
        let err =
            parse_voc("<annotation><filename>a</filename><size><width>8</width></size></annotation>").unwrap_err();
        assert_eq!(err.element, "height");
    }

    #[test]
    fn malformed_xml() {
        assert_eq!(parse_voc("<annotation><filename>").unwrap_err().element, "xml");
        assert_eq!(parse_voc("<other/>").unwrap_err().element, "annotation");
    }

    #[test]
    fn integral_floats_accepted() {
        let xml = doc("<object><name>a</name><bndbox><xmin>1.0</xmin><ymin>1</ymin><xmax>3.0</xmax><ymax>2</ymax></bndbox></object>");
        assert_eq!(parse_voc(&xml).unwrap().objects[0].bbox, BoundingBox::new(0, 0, 3, 2));
        let xml = doc("<object><name>a</name><bndbox><xmin>1.5</xmin><ymin>1</ymin><xmax>3</xmax><ymax>2</ymax></bndbox></object>");
        assert_eq!(parse_voc(&xml).unwrap_err().element, "xmin");
    }

    #[test]
    fn writer_output_parses_back() {
        let rec = AnnotationRecord {
            image_filename: "a&b.pgm".into(),
            image_width: 64,
            image_height: 48,
            objects: vec![AnnotatedObject {
                label: "<vehicle>".into(),
                bbox: BoundingBox::new(0, 3, 64, 48),
            }],
        };
        assert_eq!(parse_voc(&to_voc_xml(&rec)).unwrap(), rec);
    }
}
