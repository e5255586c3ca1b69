import init, { Playground } from "./pkg/hybridflow_browser.js";

const EXTENT = 3.5;
const GRID = 17;
const CHUNK = 25;

const $ = (id) => document.getElementById(id);
let pg = null;
let running = false;
let history = [];
let run = null;

function toPx(canvas, x, y) {
  const s = canvas.width / (2 * EXTENT);
  return [(x + EXTENT) * s, canvas.height - (y + EXTENT) * s];
}

function clear(canvas) {
  const g = canvas.getContext("2d");
  g.clearRect(0, 0, canvas.width, canvas.height);
  g.strokeStyle = "#e4e4e4";
  for (let v = -3; v <= 3; v++) {
    const [a] = toPx(canvas, v, 0);
    const [, b] = toPx(canvas, 0, v);
    g.beginPath(); g.moveTo(a, 0); g.lineTo(a, canvas.height); g.stroke();
    g.beginPath(); g.moveTo(0, b); g.lineTo(canvas.width, b); g.stroke();
  }
  return g;
}

function fillClasses() {
  for (const id of ["fclass", "sclass"]) {
    const sel = $(id);
    sel.innerHTML = "";
    for (let c = 0; c < pg.classes(); c++) sel.add(new Option(String(c), String(c)));
  }
}

function newModel() {
  running = false;
  $("run").textContent = "Train";
  pg?.free();
  pg = new Playground(0, Number($("width").value), Number($("total").value));
  history = [];
  fillClasses();
  record();
  drawField();
  clear($("points"));
  $("sampleStat").textContent = "";
}

function record() {
  const [reflow, meanflow] = pg.validation();
  history.push({ step: pg.step(), reflow, meanflow });
  $("trainStat").textContent =
    `step ${pg.step()} / ${pg.totalSteps()}\n` +
    `val loss, reflow mode   ${reflow.toExponential(3)}\n` +
    `val loss, meanflow mode ${meanflow.toExponential(3)}`;
  drawLoss();
}

function drawLoss() {
  const c = $("loss");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const vals = history.flatMap((h) => [h.reflow, h.meanflow]).filter((v) => v > 0);
  if (vals.length < 2) return;
  const lo = Math.log10(Math.min(...vals));
  const hi = Math.log10(Math.max(...vals)) + 1e-9;
  const total = pg.totalSteps();
  const px = (s) => 30 + (s / total) * (c.width - 40);
  const py = (v) => 10 + (hi - Math.log10(v)) / (hi - lo) * (c.height - 30);
  g.fillStyle = "#555";
  g.fillText(`1e${hi.toFixed(1)}`, 0, 12);
  g.fillText(`1e${lo.toFixed(1)}`, 0, c.height - 20);
  for (const [key, color] of [["reflow", "#1f77b4"], ["meanflow", "#d62728"]]) {
    g.strokeStyle = color;
    g.beginPath();
    history.forEach((h, i) => (i ? g.lineTo : g.moveTo).call(g, px(h.step), py(h[key])));
    g.stroke();
    g.fillStyle = color;
    g.fillText(key + " mode", key === "reflow" ? 40 : 140, c.height - 4);
  }
}

function tick() {
  if (!running) return;
  pg.train(CHUNK);
  if (pg.step() % 100 === 0 || pg.step() >= pg.totalSteps()) {
    record();
    drawField();
  }
  if (pg.step() >= pg.totalSteps()) {
    running = false;
    $("run").textContent = "Train";
    return;
  }
  requestAnimationFrame(tick);
}

function drawField() {
  let t = Number($("t").value);
  let r = Math.min(Number($("r").value), t);
  $("r").value = r;
  $("tv").textContent = t.toFixed(2);
  $("rv").textContent = r.toFixed(2);
  const c = $("field");
  const g = clear(c);
  const f = pg.field($("oracle").checked, r, t, Number($("fclass").value), GRID, EXTENT - 0.3);
  let max = 1e-9;
  for (let i = 0; i < f.length; i += 4) max = Math.max(max, Math.hypot(f[i + 2], f[i + 3]));
  const cell = (2 * (EXTENT - 0.3)) / (GRID - 1);
  const scale = (0.9 * cell) / max;
  g.strokeStyle = $("oracle").checked ? "#2ca02c" : "#1f77b4";
  for (let i = 0; i < f.length; i += 4) {
    // Arrows point along dz/dt reversed, i.e. the direction sampling moves.
    const [x0, y0] = toPx(c, f[i], f[i + 1]);
    const [x1, y1] = toPx(c, f[i] - scale * f[i + 2], f[i + 1] - scale * f[i + 3]);
    g.beginPath(); g.moveTo(x0, y0); g.lineTo(x1, y1); g.stroke();
    g.beginPath(); g.arc(x1, y1, 1.5, 0, 2 * Math.PI); g.fill();
  }
  g.fillStyle = "#333";
  g.fillText(`max |u| = ${max.toFixed(2)}`, 6, 14);
}

function samplerLabel() {
  const mode = $("mode").value;
  const k = $("k").value;
  if (mode === "hybridflow") return `hybridflow_a${Number($("alpha").value)}`;
  if (mode === "meanflow_1step") return mode;
  return `${mode}_k${k}`;
}

function syncControls() {
  const mode = $("mode").value;
  $("kRow").style.display = mode.endsWith("multistep") || mode === "euler_reflow" ? "" : "none";
  $("aRow").style.display = mode === "hybridflow" ? "" : "none";
  $("kv").textContent = $("k").value;
  $("av").textContent = Number($("alpha").value).toFixed(2);
}

function doSample() {
  const cls = Number($("sclass").value);
  run?.free();
  run = pg.sample(samplerLabel(), 400, cls, Math.floor(Math.random() * 1e9));
  const labels = run.labels();
  $("stage").max = labels.length - 1;
  $("stage").value = labels.length - 1;
  $("sampleStat").textContent =
    `${samplerLabel()}: NFE ${run.nfe()}, energy distance to data ${run.energyDistance().toExponential(3)}`;
  drawPoints();
}

function drawPoints() {
  const c = $("points");
  const g = clear(c);
  if (!run) return;
  const cls = Number($("sclass").value);
  const ref = pg.reference(400, cls, 1);
  g.fillStyle = "#bbb";
  for (let i = 0; i < ref.length; i += 2) {
    const [x, y] = toPx(c, ref[i], ref[i + 1]);
    g.fillRect(x - 1, y - 1, 2, 2);
  }
  const stage = Number($("stage").value);
  const labels = run.labels();
  const n = run.n();
  const s = run.states().subarray(stage * 2 * n, (stage + 1) * 2 * n);
  g.fillStyle = "#d62728";
  for (let i = 0; i < s.length; i += 2) {
    const [x, y] = toPx(c, s[i], s[i + 1]);
    g.fillRect(x - 1.5, y - 1.5, 3, 3);
  }
  $("stageName").textContent = labels[stage];
}

await init();
$("reset").onclick = newModel;
$("run").onclick = () => {
  if (pg.step() >= pg.totalSteps()) return;
  running = !running;
  $("run").textContent = running ? "Pause" : "Train";
  if (running) requestAnimationFrame(tick);
};
for (const id of ["t", "r", "oracle", "fclass"]) $(id).oninput = drawField;
for (const id of ["mode", "k", "alpha"]) $(id).oninput = syncControls;
$("sample").onclick = doSample;
$("stage").oninput = drawPoints;
$("sclass").oninput = () => run && doSample();
syncControls();
newModel();
