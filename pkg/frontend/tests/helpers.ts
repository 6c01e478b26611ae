import { App } from "../src/app.js";
import { EaasApi } from "../src/api.js";
import { FakeEaas } from "./fake_api.js";

export async function flush(times = 6): Promise<void> {
  for (let i = 0; i < times; i++) {
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}

export interface Harness {
  fake: FakeEaas;
  app: App;
  root: HTMLElement;
  saved: { filename: string; data: Uint8Array }[];
  loginAs(username: string, password?: string): Promise<void>;
}

export function makeHarness(fake: FakeEaas): Harness {
  const root = document.createElement("div");
  document.body.replaceChildren(root);
  const api = new EaasApi("", fake.fetch);
  const saved: { filename: string; data: Uint8Array }[] = [];
  const app = new App(root, api, {
    pollIntervalMs: 3_600_000, // tests refresh explicitly
    saveFile: (filename, data) => saved.push({ filename, data }),
  });
  app.start();

  async function loginAs(username: string, password = "pw"): Promise<void> {
    (root.querySelector("#login-user") as HTMLInputElement).value = username;
    (root.querySelector("#login-pass") as HTMLInputElement).value = password;
    root.querySelector("#login-form")!.dispatchEvent(
      new Event("submit", { bubbles: true, cancelable: true }),
    );
    await flush();
  }

  return { fake, app, root, saved, loginAs };
}

export function containerRow(root: HTMLElement, containerId: string): HTMLElement {
  const row = root.querySelector(`tr[data-container="${containerId}"]`);
  if (!row) throw new Error(`no row for ${containerId}`);
  return row as HTMLElement;
}

export function rowState(root: HTMLElement, containerId: string): string {
  return containerRow(root, containerId).querySelector(".state")!.textContent ?? "";
}

export function clickAction(root: HTMLElement, containerId: string, action: string): void {
  const button = containerRow(root, containerId).querySelector(
    `button[data-action="${action}"]`,
  ) as HTMLButtonElement | null;
  if (!button) throw new Error(`no ${action} button for ${containerId}`);
  button.click();
}
