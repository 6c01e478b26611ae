// Single-page consoles over the controller API: the administrator sees every
// node and container with live metrics and stop/start/terminate controls; an
// application owner sees only their own containers, a launch form, app
// results and the one-time private-key download.
//
// All state shown comes from the last poll of the API; the client invents
// nothing. At most one mutation per container is in flight: the acted-on
// row's buttons stay disabled until the response lands.

import {
  ApiError,
  ContainerDoc,
  EaasApi,
  NodeDoc,
  RequestDoc,
  decodeResult,
  freshRequestId,
} from "./api.js";

export interface AppOptions {
  pollIntervalMs?: number;
  saveFile?: (filename: string, data: Uint8Array) => void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  if (text !== undefined) node.textContent = text;
  return node;
}

function option(value: string, label: string): HTMLOptionElement {
  const node = el("option", { value }, label);
  return node;
}

function defaultSaveFile(filename: string, data: Uint8Array): void {
  const blob = new Blob([data.slice()], { type: "application/octet-stream" });
  const url = URL.createObjectURL(blob);
  const anchor = el("a", { href: url, download: filename });
  document.body.appendChild(anchor);
  anchor.click();
  anchor.remove();
  URL.revokeObjectURL(url);
}

interface PendingKey {
  containerId: string;
  keyHandle: string;
  downloaded: boolean;
}

export class App {
  private root: HTMLElement;
  readonly api: EaasApi;
  private saveFile: (filename: string, data: Uint8Array) => void;
  private pollIntervalMs: number;
  private timer: ReturnType<typeof setInterval> | null = null;

  private nodes: NodeDoc[] = [];
  private containers: ContainerDoc[] = [];
  private inFlight = new Set<string>();
  private rowErrors = new Map<string, string>();
  private pendingKeys: PendingKey[] = [];
  private appResults = new Map<string, string>();
  private banner = "";

  constructor(root: HTMLElement, api: EaasApi, options: AppOptions = {}) {
    this.root = root;
    this.api = api;
    this.saveFile = options.saveFile ?? defaultSaveFile;
    this.pollIntervalMs = options.pollIntervalMs ?? 10_000;
  }

  // -- lifecycle --------------------------------------------------------------

  start(): void {
    this.renderLogin();
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }

  async refresh(): Promise<void> {
    try {
      [this.nodes, this.containers] = await Promise.all([
        this.api.nodes(),
        this.api.containers(),
      ]);
      this.banner = "";
    } catch (error) {
      this.banner = describe(error);
    }
    this.renderConsole();
  }

  // -- login -------------------------------------------------------------------

  private renderLogin(message = ""): void {
    this.root.replaceChildren();
    const form = el("form", { id: "login-form", class: "login" });
    const user = el("input", { id: "login-user", placeholder: "username", autocomplete: "username" });
    const pass = el("input", {
      id: "login-pass", placeholder: "password", type: "password",
      autocomplete: "current-password",
    });
    const submit = el("button", { type: "submit" }, "Sign in");
    const error = el("p", { id: "login-error", class: "error" }, message);
    form.append(el("h1", {}, "Edge-as-a-Service"), user, pass, submit, error);
    form.addEventListener("submit", async (event) => {
      event.preventDefault();
      try {
        await this.api.login(user.value, pass.value);
        await this.refresh();
        this.timer = setInterval(() => void this.refresh(), this.pollIntervalMs);
      } catch (err) {
        error.textContent = describe(err);
      }
    });
    this.root.append(form);
  }

  // -- console rendering ----------------------------------------------------------

  private renderConsole(): void {
    this.root.replaceChildren();
    const isAdmin = this.api.role === "administrator";
    const header = el("header", {});
    header.append(
      el("h1", {}, isAdmin ? "EaaS administration" : "EaaS console"),
      el("span", { id: "whoami", class: "muted" },
         `${this.api.username} (${this.api.role})`),
    );
    this.root.append(header);
    if (this.banner) this.root.append(el("p", { id: "banner", class: "error" }, this.banner));

    if (isAdmin) this.root.append(this.nodesTable());
    this.root.append(this.containersTable(isAdmin));
    if (!isAdmin) {
      this.root.append(this.launchForm());
      this.root.append(this.keyPanel());
      this.root.append(this.resultsPanel());
    }
  }

  private nodesTable(): HTMLElement {
    const section = el("section", { id: "nodes" });
    section.append(el("h2", {}, `Edge nodes (${this.nodes.length})`));
    const table = el("table", { id: "nodes-table" });
    const head = el("tr", {});
    for (const title of ["node", "address", "alive", "cpu %", "mem %"]) {
      head.append(el("th", {}, title));
    }
    table.append(head);
    for (const node of this.nodes) {
      const row = el("tr", { "data-node": node.nodeId });
      row.append(
        el("td", {}, node.nodeId),
        el("td", {}, `${node.ip}:${node.port}`),
        el("td", { class: node.alive ? "ok" : "bad" }, node.alive ? "yes" : "no"),
        el("td", {}, node.metrics ? node.metrics.cpuPercent.toFixed(1) : "-"),
        el("td", {}, node.metrics ? node.metrics.memPercent.toFixed(1) : "-"),
      );
      table.append(row);
    }
    section.append(table);
    return section;
  }

  private containersTable(isAdmin: boolean): HTMLElement {
    const section = el("section", { id: "containers" });
    section.append(el("h2", {}, `Containers (${this.containers.length})`));
    const table = el("table", { id: "containers-table" });
    const head = el("tr", {});
    const titles = ["container", "node", "type", "state", "owner", "address", "actions", ""];
    for (const title of titles) head.append(el("th", {}, title));
    table.append(head);
    for (const container of this.containers) {
      table.append(this.containerRow(container, isAdmin));
    }
    section.append(table);
    return section;
  }

  private containerRow(container: ContainerDoc, isAdmin: boolean): HTMLElement {
    const row = el("tr", { "data-container": container.containerId });
    row.append(
      el("td", {}, container.containerId),
      el("td", {}, container.nodeId),
      el("td", {}, container.conType),
      el("td", { class: `state state-${container.status}` }, container.status),
      el("td", {}, container.owner),
      el("td", {}, container.ip ?? "-"),
    );
    const actions = el("td", { class: "actions" });
    // the admin drives running containers; owners manage their own the same way
    if (container.conType === "os") {
      for (const action of ["start", "stop", "terminate"] as const) {
        const button = el("button", { "data-action": action }, action);
        button.disabled = this.inFlight.has(container.containerId);
        button.addEventListener("click", () =>
          void this.act(container, action),
        );
        actions.append(button);
      }
    }
    row.append(actions);
    row.append(el("td", { class: "error row-error" }, this.rowErrors.get(container.containerId) ?? ""));
    void isAdmin;
    return row;
  }

  private async act(
    container: ContainerDoc, action: "start" | "stop" | "terminate",
  ): Promise<void> {
    if (this.inFlight.has(container.containerId)) return;
    this.inFlight.add(container.containerId);
    this.renderConsole();
    try {
      await this.api.submit({
        requestId: freshRequestId(),
        conType: container.conType,
        nodeId: container.nodeId,
        action,
        containerId: container.containerId,
      });
      this.rowErrors.delete(container.containerId);
    } catch (error) {
      this.rowErrors.set(container.containerId, describe(error));
    } finally {
      this.inFlight.delete(container.containerId);
    }
    await this.refresh();
  }

  // -- owner widgets ------------------------------------------------------------

  private launchForm(): HTMLElement {
    const section = el("section", { id: "launch" });
    section.append(el("h2", {}, "Launch a container"));
    const form = el("form", { id: "launch-form" });
    const kind = el("select", { id: "launch-kind" });
    kind.append(option("os", "OS container"), option("app", "Application container"));
    const node = el("select", { id: "launch-node" });
    for (const n of this.nodes.filter((n) => n.alive)) {
      node.append(option(n.nodeId, n.nodeId));
    }
    const cid = el("input", { id: "launch-cid", placeholder: "container id" });
    const image = el("input", { id: "launch-image", placeholder: "app image (app only)" });
    const submit = el("button", { type: "submit" }, "Launch");
    const error = el("p", { id: "launch-error", class: "error" });
    form.append(kind, node, cid, image, submit, error);
    form.addEventListener("submit", async (event) => {
      event.preventDefault();
      const request: RequestDoc = {
        requestId: freshRequestId(),
        conType: kind.value as "os" | "app",
        nodeId: node.value,
        action: "launch",
        containerId: cid.value,
      };
      if (kind.value === "app") request.appImage = image.value;
      try {
        const response = await this.api.submit(request);
        if (response.keyHandle) {
          this.pendingKeys.push({
            containerId: request.containerId,
            keyHandle: response.keyHandle,
            downloaded: false,
          });
        }
        if (response.result !== undefined) {
          this.appResults.set(request.containerId, decodeResult(response.result));
        }
        error.textContent = "";
        await this.refresh();
      } catch (err) {
        error.textContent = describe(err);
      }
    });
    section.append(form);
    return section;
  }

  private keyPanel(): HTMLElement {
    const section = el("section", { id: "keys" });
    section.append(el("h2", {}, "Private keys (one-time download)"));
    const list = el("ul", { id: "keys-list" });
    for (const pending of this.pendingKeys) {
      const item = el("li", { "data-key-container": pending.containerId });
      const button = el(
        "button", { class: "key-download" },
        pending.downloaded ? "downloaded" : `download key for ${pending.containerId}`,
      );
      button.disabled = pending.downloaded;
      button.addEventListener("click", async () => {
        try {
          const data = await this.api.downloadKey(pending.keyHandle);
          this.saveFile(`${pending.containerId}.key`, data);
        } catch (error) {
          item.append(el("span", { class: "error" }, describe(error)));
        } finally {
          // one-shot either way: the controller hands a key out exactly once
          pending.downloaded = true;
          button.disabled = true;
          button.textContent = "downloaded";
        }
      });
      item.append(button);
      list.append(item);
    }
    section.append(list);
    return section;
  }

  private resultsPanel(): HTMLElement {
    const section = el("section", { id: "results" });
    section.append(el("h2", {}, "Application results"));
    for (const [containerId, result] of this.appResults) {
      const block = el("div", { class: "result", "data-result": containerId });
      block.append(el("h3", {}, containerId), el("pre", {}, result));
      section.append(block);
    }
    return section;
  }
}

function describe(error: unknown): string {
  if (error instanceof ApiError) return `${error.code}: ${error.message}`;
  return String(error);
}

export function mount(root: HTMLElement, options: AppOptions = {}): App {
  const api = new EaasApi("");
  const app = new App(root, api, options);
  app.start();
  return app;
}
