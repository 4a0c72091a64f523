import init, { sample_posterior, ToyTranslator, harmonic_mean } from "./pkg/abp_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

function drawPosterior(res) {
  const cv = $("pcanvas");
  const g = cv.getContext("2d");
  const centers = res.centers(), dens = res.density(), exact = res.exact();
  const w = cv.width, h = cv.height, pad = 30;
  const ymax = Math.max(...dens, ...exact) * 1.1;
  const lo = centers[0], hi = centers[centers.length - 1];
  const bw = (w - 2 * pad) / centers.length;
  const px = (x) => pad + ((x - lo) / (hi - lo)) * (w - 2 * pad - bw) + bw / 2;
  const py = (y) => h - pad - (y / ymax) * (h - 2 * pad);
  g.clearRect(0, 0, w, h);
  g.fillStyle = "#9ecae1";
  dens.forEach((d, i) => g.fillRect(pad + i * bw, py(d), bw - 1, h - pad - py(d)));
  g.strokeStyle = "#08306b";
  g.lineWidth = 2;
  g.beginPath();
  exact.forEach((d, i) => (i ? g.lineTo(px(centers[i]), py(d)) : g.moveTo(px(centers[i]), py(d))));
  g.stroke();
  g.fillStyle = "#444";
  g.fillText(lo.toFixed(2), pad, h - 10);
  g.fillText(hi.toFixed(2), w - pad - 30, h - 10);
  $("pstats").textContent =
    `sample mean ${res.mean.toFixed(4)}   exact ${res.exact_mean.toFixed(4)}\n` +
    `sample var  ${res.var.toFixed(4)}   exact ${res.exact_var.toFixed(4)}`;
}

function runPosterior() {
  $("psv").textContent = num("ps").toFixed(2);
  try {
    const res = sample_posterior(num("pa"), num("pb"), num("psigma"), num("pc"), num("px"),
      num("ps"), Math.max(1, num("pl")), Math.max(100, num("pn")), 50, BigInt(1));
    drawPosterior(res);
    res.free();
  } catch (e) {
    $("pstats").textContent = `error: ${e}`;
  }
}

let toy = null;

function drawToy() {
  const cv = $("tcanvas");
  const g = cv.getContext("2d");
  const real = toy.real_points(1);
  const seen = $("tseenshow").checked ? toy.real_points(0) : new Float64Array();
  const synth = toy.synth_points(60);
  const all = [...real, ...synth, ...seen];
  let xs = [], ys = [];
  for (let i = 0; i < all.length; i += 3) { xs.push(all[i]); ys.push(all[i + 1]); }
  const [x0, x1, y0, y1] = [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
  const pad = 20, w = cv.width, h = cv.height;
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const sy = (y) => h - pad - ((y - y0) / (y1 - y0 || 1)) * (h - 2 * pad);
  const colour = (c) => PALETTE[(c - toy.num_seen) % PALETTE.length];
  g.clearRect(0, 0, w, h);
  g.fillStyle = "#bbb";
  for (let i = 0; i < seen.length; i += 3) g.fillRect(sx(seen[i]) - 1, sy(seen[i + 1]) - 1, 2, 2);
  for (let i = 0; i < real.length; i += 3) {
    g.fillStyle = colour(real[i + 2]);
    g.beginPath();
    g.arc(sx(real[i]), sy(real[i + 1]), 3, 0, 2 * Math.PI);
    g.fill();
  }
  g.lineWidth = 1;
  for (let i = 0; i < synth.length; i += 3) {
    const x = sx(synth[i]), y = sy(synth[i + 1]);
    g.strokeStyle = colour(synth[i + 2]);
    g.beginPath();
    g.moveTo(x - 3, y - 3); g.lineTo(x + 3, y + 3);
    g.moveTo(x + 3, y - 3); g.lineTo(x - 3, y + 3);
    g.stroke();
  }
  const acc = toy.zsl_accuracy(100, 20);
  const loss = Number.isNaN(toy.loss) ? "n/a" : toy.loss.toFixed(4);
  $("tstats").textContent =
    `epoch ${toy.epoch}   mean squared residual ${loss}   ZSL top-1 ${(100 * acc).toFixed(1)}% ` +
    `(chance ${(100 / num("tunseen")).toFixed(1)}%)`;
}

function resetToy() {
  if (toy) toy.free();
  try {
    toy = new ToyTranslator(num("tseen"), num("tunseen"), BigInt(num("tseed")));
    drawToy();
  } catch (e) {
    toy = null;
    $("tstats").textContent = `error: ${e}`;
  }
}

function updateHarmonic() {
  const s = num("hs"), u = num("hu");
  $("hout").textContent = `H = 2·A_S·A_U / (A_S + A_U) = ${harmonic_mean(s, u).toFixed(3)}`;
}

async function main() {
  await init();
  $("status").textContent = "";
  $("prun").onclick = runPosterior;
  $("ps").oninput = () => ($("psv").textContent = num("ps").toFixed(2));
  $("treset").onclick = resetToy;
  $("ttrain").onclick = () => {
    if (!toy) return;
    toy.train(10);
    drawToy();
  };
  $("tseenshow").onchange = () => toy && drawToy();
  $("hs").oninput = updateHarmonic;
  $("hu").oninput = updateHarmonic;
  runPosterior();
  resetToy();
  updateHarmonic();
}

main().catch((e) => ($("status").textContent = `failed to load: ${e}`));
