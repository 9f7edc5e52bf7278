import init, { DemoSession } from "./pkg/dcrl_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const EPOCHS_PER_FRAME = 2;

let session = null;
let running = false;

function status(text, isError = false) {
  $("status").textContent = text;
  $("status").className = isError ? "error" : "";
}

function draw(canvas, points, colors, centers = []) {
  const ctx = canvas.getContext("2d");
  const all = points.concat(centers);
  const xs = all.map((p) => p[0]);
  const ys = all.map((p) => p[1]);
  const [x0, x1, y0, y1] = [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
  const pad = 12;
  const sx = (canvas.width - 2 * pad) / (x1 - x0 || 1);
  const sy = (canvas.height - 2 * pad) / (y1 - y0 || 1);
  const px = (p) => [pad + (p[0] - x0) * sx, canvas.height - pad - (p[1] - y0) * sy];
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  points.forEach((p, i) => {
    const [u, v] = px(p);
    ctx.fillStyle = COLORS[colors[i] % COLORS.length];
    ctx.fillRect(u - 1.5, v - 1.5, 3, 3);
  });
  ctx.strokeStyle = "#000";
  ctx.lineWidth = 2;
  centers.forEach((c) => {
    const [u, v] = px(c);
    ctx.beginPath();
    ctx.moveTo(u - 6, v); ctx.lineTo(u + 6, v);
    ctx.moveTo(u, v - 6); ctx.lineTo(u, v + 6);
    ctx.stroke();
  });
}

function show(progress) {
  const p = progress.points;
  draw($("input"), p.input, p.labels);
  draw($("latent"), p.latent, p.pred, p.centers);
  const fmt = (v, d = 4) => (v === null ? "-" : v.toFixed(d));
  status(
    `epoch ${progress.epoch}/${progress.epochs}  alpha ${fmt(progress.alpha)}  beta ${fmt(progress.beta)}  ` +
      `ae ${fmt(progress.l_ae, 5)}  acc ${fmt(progress.acc)}  nmi ${fmt(progress.nmi)}`
  );
}

function setup() {
  if (session) session.free();
  session = null;
  $("metrics").hidden = true;
  status("pretraining...");
  // Let the status line paint before the blocking call.
  setTimeout(() => {
    try {
      session = new DemoSession(
        $("kind").value,
        Number($("n").value),
        Number($("clusters").value),
        Number($("seed").value),
        $("structure").checked,
        Number($("epochs").value)
      );
      show(JSON.parse(session.step(0)));
      $("train").disabled = false;
      $("evaluate").disabled = false;
    } catch (e) {
      status(String(e), true);
    }
  }, 20);
}

function train() {
  if (!session || running) return;
  running = true;
  $("train").disabled = true;
  const frame = () => {
    try {
      show(JSON.parse(session.step(EPOCHS_PER_FRAME)));
    } catch (e) {
      status(String(e), true);
      running = false;
      return;
    }
    if (session.finished) {
      running = false;
      evaluate();
    } else {
      requestAnimationFrame(frame);
    }
  };
  requestAnimationFrame(frame);
}

function evaluate() {
  if (!session) return;
  try {
    const m = JSON.parse(session.evaluate());
    const row = $("metrics").querySelector("tbody tr");
    row.innerHTML = ["acc", "nmi", "rre", "trust", "cont", "d_rmse", "lgd", "cra"]
      .map((k) => `<td>${m[k].toFixed(4)}</td>`)
      .join("");
    $("metrics").hidden = false;
  } catch (e) {
    status(String(e), true);
  }
}

await init();
$("setup").addEventListener("click", setup);
$("train").addEventListener("click", train);
$("evaluate").addEventListener("click", evaluate);
status("ready");
