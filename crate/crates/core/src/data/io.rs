use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Graph, GraphTask, NodeTask, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Contents of `meta.json` in a node-dataset directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMeta {
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub task: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    n: usize,
    edges: Vec<[usize; 2]>,
    x: Vec<Vec<f64>>,
    y: usize,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty content lines with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.is_empty())
}

fn expect_count(path: &Path, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dataset(format!(
            "{}: {got} {what}, meta.json says {want}",
            path.display()
        )));
    }
    Ok(())
}

/// Loads a node-dataset directory (`meta.json`, `edges.tsv`, `features.csv`,
/// `labels.csv`, `splits.csv`) and cross-checks counts against the meta file.
pub fn load_node_dataset(dir: &Path) -> Result<NodeTask> {
    let meta_path = dir.join("meta.json");
    let meta: NodeMeta =
        serde_json::from_str(&read(&meta_path)?).map_err(|e| parse_err(&meta_path, e.line(), e.to_string()))?;
    if meta.task != "node" {
        return Err(Error::Dataset(format!(
            "{}: task is {:?}, expected \"node\"",
            meta_path.display(),
            meta.task
        )));
    }
    let n = meta.num_nodes;

    let edges_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for (ln, line) in lines(&read(&edges_path)?) {
        let mut parts = line.split('\t');
        let (Some(u), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(&edges_path, ln, "expected `u<TAB>v`"));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(&edges_path, ln, format!("bad node index {s:?}")))
        };
        let (u, v) = (parse(u)?, parse(v)?);
        if u >= n || v >= n {
            return Err(parse_err(
                &edges_path,
                ln,
                format!("edge ({u}, {v}) out of range for {n} nodes"),
            ));
        }
        edges.push((u, v));
    }

    let feat_path = dir.join("features.csv");
    let mut data = Vec::with_capacity(n * meta.num_features);
    let mut rows = 0;
    for (ln, line) in lines(&read(&feat_path)?) {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(&feat_path, ln, format!("bad number {field:?}")))?;
            data.push(v);
        }
        if data.len() - before != meta.num_features {
            return Err(parse_err(
                &feat_path,
                ln,
                format!("{} values, expected {}", data.len() - before, meta.num_features),
            ));
        }
        rows += 1;
    }
    expect_count(&feat_path, "feature rows", rows, n)?;
    let x = Tensor::new(n, meta.num_features, data)?;

    let labels_path = dir.join("labels.csv");
    let mut labels = Vec::with_capacity(n);
    for (ln, line) in lines(&read(&labels_path)?) {
        let l: usize = line
            .parse()
            .map_err(|_| parse_err(&labels_path, ln, format!("bad label {line:?}")))?;
        if l >= meta.num_classes {
            return Err(parse_err(
                &labels_path,
                ln,
                format!("label {l} out of range for {} classes", meta.num_classes),
            ));
        }
        labels.push(l);
    }
    expect_count(&labels_path, "labels", labels.len(), n)?;

    let splits_path = dir.join("splits.csv");
    let mut splits = Vec::with_capacity(n);
    for (ln, line) in lines(&read(&splits_path)?) {
        let s = Split::parse(line).ok_or_else(|| parse_err(&splits_path, ln, format!("unknown split {line:?}")))?;
        splits.push(s);
    }
    expect_count(&splits_path, "split entries", splits.len(), n)?;

    let graph = Graph::new(n, edges, x, None)?;
    NodeTask::new(graph, labels, splits, meta.num_classes)
}

/// Writes a node dataset in the portable directory format.
pub fn write_node_dataset(dir: &Path, task: &NodeTask) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = NodeMeta {
        num_nodes: task.graph.num_nodes,
        num_features: task.graph.num_features(),
        num_classes: task.num_classes,
        task: "node".into(),
    };
    let mut meta_text = serde_json::to_string(&meta).expect("meta serializes");
    meta_text.push('\n');
    write_file(&dir.join("meta.json"), &meta_text)?;

    let mut edges = String::new();
    for (u, v) in &task.graph.edges {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write_file(&dir.join("edges.tsv"), &edges)?;

    let mut feats = String::new();
    for i in 0..task.graph.num_nodes {
        let row: Vec<String> = task.graph.x.row(i).iter().map(|v| v.to_string()).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    write_file(&dir.join("features.csv"), &feats)?;

    let labels: String = task.labels.iter().map(|l| format!("{l}\n")).collect();
    write_file(&dir.join("labels.csv"), &labels)?;
    let splits: String = task.splits.iter().map(|s| format!("{}\n", s.as_str())).collect();
    write_file(&dir.join("splits.csv"), &splits)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a `*.graphs.jsonl` file, one graph per line.
///
/// With `num_classes = None` the class count is one more than the largest
/// label seen. Every graph starts in the training split; use
/// [`holdout_split`](super::holdout_split) or cross-validation to assign
/// roles.
pub fn load_graph_dataset(path: &Path, num_classes: Option<usize>) -> Result<GraphTask> {
    let text = read(path)?;
    let mut graphs = Vec::new();
    for (ln, line) in lines(&text) {
        let rec: GraphRecord =
            serde_json::from_str(line).map_err(|e| parse_err(path, ln, format!("record {}: {e}", graphs.len())))?;
        let record_err = |msg: String| parse_err(path, ln, format!("record {}: {msg}", graphs.len()));
        if rec.x.len() != rec.n {
            return Err(record_err(format!("{} feature rows for n={}", rec.x.len(), rec.n)));
        }
        let x = Tensor::from_rows(&rec.x).map_err(|e| record_err(e.to_string()))?;
        let edges = rec.edges.iter().map(|e| (e[0], e[1])).collect();
        let g = Graph::new(rec.n, edges, x, Some(rec.y)).map_err(|e| record_err(e.to_string()))?;
        if let Some(c) = num_classes {
            if rec.y >= c {
                return Err(record_err(format!("label {} out of range for {c} classes", rec.y)));
            }
        }
        if let Some(first) = graphs.first() {
            let first: &Graph = first;
            if first.num_features() != g.num_features() {
                return Err(record_err(format!(
                    "feature dimension {} differs from {}",
                    g.num_features(),
                    first.num_features()
                )));
            }
        }
        graphs.push(g);
    }
    if graphs.is_empty() {
        return Err(Error::Dataset(format!("{}: no graphs", path.display())));
    }
    let num_classes = num_classes.unwrap_or_else(|| graphs.iter().filter_map(|g| g.y).max().unwrap_or(0) + 1);
    let splits = vec![Split::Train; graphs.len()];
    GraphTask::new(graphs, num_classes, splits)
}

/// Writes graphs as `*.graphs.jsonl`. Every graph must carry a label.
pub fn write_graph_dataset(path: &Path, graphs: &[Graph]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for (i, g) in graphs.iter().enumerate() {
        let y = g.y.ok_or_else(|| Error::Dataset(format!("graph {i} has no label")))?;
        let rec = GraphRecord {
            n: g.num_nodes,
            edges: g.edges.iter().map(|&(u, v)| [u, v]).collect(),
            x: g.x.to_rows(),
            y,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// A directory is read as a node dataset, anything else as a graph file.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        load_node_dataset(path).map(Dataset::Node)
    } else if path.exists() {
        load_graph_dataset(path, None).map(Dataset::Graph)
    } else {
        Err(Error::Io {
            path: PathBuf::from(path),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_toy(dir: &Path) {
        write_file(
            &dir.join("meta.json"),
            "{\"num_nodes\":2,\"num_features\":3,\"num_classes\":2,\"task\":\"node\"}\n",
        )
        .unwrap();
        write_file(&dir.join("edges.tsv"), "0\t1\n1\t0\n").unwrap();
        write_file(&dir.join("features.csv"), "1,0,0.5\n0,1,-2.25\n").unwrap();
        write_file(&dir.join("labels.csv"), "0\n1\n").unwrap();
        write_file(&dir.join("splits.csv"), "train\nval\n").unwrap();
    }

    #[test]
    fn loads_two_node_toy() {
        let dir = tempfile::tempdir().unwrap();
        write_toy(dir.path());
        let t = load_node_dataset(dir.path()).unwrap();
        assert_eq!(t.graph.num_nodes, 2);
        assert_eq!(t.graph.edges, vec![(0, 1), (1, 0)]);
        assert_eq!(t.graph.x.row(1), &[0.0, 1.0, -2.25]);
        assert_eq!(t.split_indices(Split::Train), vec![0]);
        assert_eq!(t.split_indices(Split::Val), vec![1]);
        assert!(t.split_indices(Split::Test).is_empty());
    }

    #[test]
    fn round_trip_node_dataset() {
        let dir = tempfile::tempdir().unwrap();
        write_toy(dir.path());
        let t = load_node_dataset(dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_node_dataset(out.path(), &t).unwrap();
        assert_eq!(load_node_dataset(out.path()).unwrap(), t);
        for f in ["meta.json", "edges.tsv", "labels.csv", "splits.csv"] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(out.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        write_toy(dir.path());
        write_file(&dir.path().join("features.csv"), "1,0,0.5\n0,x,1\n").unwrap();
        match load_node_dataset(dir.path()) {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 2);
                assert!(path.ends_with("features.csv"));
            }
            other => panic!("unexpected {other:?}"),
        }
        write_toy(dir.path());
        write_file(&dir.path().join("edges.tsv"), "0\t1\n0 1\n").unwrap();
        assert!(matches!(
            load_node_dataset(dir.path()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn count_mismatch_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        write_toy(dir.path());
        write_file(&dir.path().join("labels.csv"), "0\n").unwrap();
        assert!(matches!(load_node_dataset(dir.path()), Err(Error::Dataset(_))));
        write_toy(dir.path());
        fs::remove_file(dir.path().join("splits.csv")).unwrap();
        assert!(matches!(load_node_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn graph_file_single_node() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.graphs.jsonl");
        write_file(&p, "{\"n\":1,\"edges\":[],\"x\":[[0.5]],\"y\":0}\n").unwrap();
        let t = load_graph_dataset(&p, None).unwrap();
        assert_eq!(t.graphs.len(), 1);
        assert_eq!(t.num_classes, 1);
        assert!(t.graphs[0].edges.is_empty());
    }

    #[test]
    fn graph_file_errors_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.graphs.jsonl");
        write_file(
            &p,
            "{\"n\":1,\"edges\":[],\"x\":[[0.5]],\"y\":0}\n{\"n\":2,\"edges\":[[0,5]],\"x\":[[1],[2]],\"y\":0}\n",
        )
        .unwrap();
        let err = load_graph_dataset(&p, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(err.to_string().contains("record 1"), "{err}");

        write_file(&p, "{\"n\":1,\"edges\":[],\"x\":[[0.5]],\"y\":3}\n").unwrap();
        assert!(load_graph_dataset(&p, Some(3)).is_err());
        assert!(load_graph_dataset(&p, Some(4)).is_ok());
    }

    #[test]
    fn graph_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.graphs.jsonl");
        let graphs = vec![
            Graph::new(
                2,
                vec![(0, 1)],
                Tensor::from_rows(&[[0.1, 1e-7], [3.0, -2.5]]).unwrap(),
                Some(1),
            )
            .unwrap(),
            Graph::new(1, vec![], Tensor::from_rows(&[[1.0 / 3.0, 2.0]]).unwrap(), Some(0)).unwrap(),
        ];
        write_graph_dataset(&p, &graphs).unwrap();
        let t = load_graph_dataset(&p, None).unwrap();
        assert_eq!(t.graphs, graphs);
        let first = fs::read(&p).unwrap();
        write_graph_dataset(&p, &t.graphs).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }
}
