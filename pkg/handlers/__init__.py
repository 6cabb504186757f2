"""命令列路由與各子指令的處理器。"""
